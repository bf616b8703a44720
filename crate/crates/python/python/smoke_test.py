"""Builds a small synthetic dataset, trains HMIL briefly and checks the
outputs are well-formed. Run after `maturin develop` in crates/python."""

import math
import os
import tempfile

import pyhmil


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


tax = pyhmil.Taxonomy.balanced(2, 4)
assert tax.num_coarse == 2 and tax.num_fine == 4
assert [tax.parent(f) for f in range(4)] == [0, 0, 1, 1]
assert all(sum(col) == 1.0 for col in zip(*tax.projection()))

ds = pyhmil.Dataset.synthetic(
    seed=3, config={"d_c": 8, "bags_per_fine_class": 12, "instances_range": [4, 9]}
).with_splits(0.5, 0.25, 0.25, seed=3)
assert len(ds) == 48 and ds.d == 8
bag_id, features, y_f, y_c, split = ds.bag(0)
assert tax.parent(y_f) == y_c and len(features[0]) == 8

model = pyhmil.Model.hmil(ds.d, ds.taxonomy, seed=0)
out = model.forward(features)
assert close(sum(out["p_f"]), 1.0) and close(sum(out["p_c"]), 1.0)
assert all(close(sum(row), 1.0) for row in out["a_f"])

history = model.fit(ds, {"epochs": 4, "batch_size": 8})
assert len(history["records"]) == 4
assert history["records"][0]["beta"] == 1.0
report = model.evaluate(ds, "test", bootstrap=50, seed=1)
auc = report["fine"]["macro_auc"]
assert 0.0 <= auc <= 1.0 and "bootstrap" in report["fine"]

with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "model.hmil")
    model.save(path)
    again = pyhmil.Model.load(path)
    assert again.forward(features)["p_f"] == model.forward(features)["p_f"]

flat = pyhmil.Model.flat("abmil", ds.d, ds.taxonomy)
p = flat.forward(features)
assert len(p) == 4 and close(sum(p), 1.0)

gc = pyhmil.gradcheck()
assert gc["passed"] and len(gc["rows"]) == 6
assert pyhmil.schedule_beta(0, 10) == 1.0 and close(pyhmil.schedule_beta(5, 10), 0.5)
macro, per_class = pyhmil.auc_ovr([0, 1, 0, 1], [[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.4, 0.6]])
assert macro == 1.0

try:
    pyhmil.Taxonomy(["a"], ["x"], [("x", "missing")])
except pyhmil.HmilException:
    pass
else:
    raise AssertionError("bad taxonomy accepted")

print(f"smoke ok: test fine macro-AUC {auc:.4f}, gradcheck max {max(r['max_rel_error'] for r in gc['rows']):.2e}")

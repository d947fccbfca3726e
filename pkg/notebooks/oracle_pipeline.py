"""The end-to-end pipeline on the simulated device: sample, lower, measure,
train the three learners and compare their errors.

Uses 300 models so it finishes in about a minute.
"""
from vitlat.archspace import sample_arch
from vitlat.datastore import split
from vitlat.evaluation import evaluate
from vitlat.learners import GBDT, LASSO, RF, fit_bundle, graph_features, mdi_importance
from vitlat.opgraph import lower
from vitlat.simdevice import DWCONV_SPIKES, FORMAT_PENALTY, DeviceModel, generate_measurements

N = 300
graphs = [lower(sample_arch(s)) for s in range(N)]
features = {g.arch_id: graph_features(g) for g in graphs}
device = DeviceModel(modes={FORMAT_PENALTY, DWCONV_SPIKES}, rng_noise_pct=2.0)
ms = generate_measurements(graphs, device, seed=0)
sp = split(ms.model_ids(), N - 50, seed=0)
print(f"{len(ms)} op measurements from {N} models; {len(sp.train_ids)} train / {len(sp.test_ids)} test")

bundles = {}
for method in (LASSO, GBDT, RF):
    bundles[method] = fit_bundle(graphs, ms, method, seed=0, model_ids=sp.train_ids, features=features)
    res = evaluate(graphs, ms, bundles[method], model_ids=sp.test_ids, features=features)
    worst = sorted(res.op_mape.items(), key=lambda kv: -kv[1])[:3]
    print(f"{method:5s} end-to-end {res.end_to_end_mape:5.2f}%   worst ops: "
          + ", ".join(f"{c} {v:.1f}%" for c, v in worst))

# Summed op predictions hide per-op error: over- and under-estimates cancel.
rep = evaluate(graphs, ms, bundles[LASSO], model_ids=sp.test_ids[:1], features=features).reports[0]
print(f"\n{rep.model_id}: measured {rep.end_to_end_measured_us:.0f}us, Lasso predicts "
      f"{rep.end_to_end_predicted_us:.0f}us")
for cat, (lat, mem) in sorted(rep.breakdown.items(), key=lambda kv: -kv[1][0])[:5]:
    print(f"    {cat:18s} {100 * lat:5.1f}% of latency  {100 * mem:5.1f}% of traffic")

imp = mdi_importance(bundles[RF].predictors["Conv2d|ChannelLast"])
print("\nchannel-last conv MDI:", ", ".join(f"{k} {v:.3f}" for k, v in sorted(imp.items(), key=lambda kv: -kv[1])[:4]))

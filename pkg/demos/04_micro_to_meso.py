"""Kawasaki ensembles at equilibrium against the spline ODE (about 40 s)."""

from pathlib import Path

from kawasaki_twoscale.harness import ExperimentConfig, run_experiment, write_outputs

cfg = ExperimentConfig.from_json(Path(__file__).with_name("configs") / "micro_to_meso.json")
report, _ = run_experiment(cfg)
for s in report.sizes:
    print(f"K={s['K']:3d}  sup_t E|PX - eta|^2_Abar-inv = {s['error']:.3e} +- {s['stderr']:.1e}"
          f"  (envelope {s['envelope']:.2e})")
print(f"fitted slope in K: {report.fit['slope']:.2f}, 95% interval {report.fit['interval']}")
write_outputs(report, cfg.outdir)

"""Short parity runs: RA against the frozen-only arm.

Uses 400 steps so it finishes in well under a minute; the acceptance suite
runs the full 2000-step recipe over five seeds.

    python demos/parity_trend.py
"""
from sen.config import default_config
from sen.experiments import run

for arm in ("pure", "ra"):
    cfg = default_config(arm=arm, training={"steps": 400, "eval_every": 100})
    res = run(cfg, seed=0)
    curve = [(r["step"], round(r["value"], 3)) for r in res["records"] if r["metric"] == "test_acc"]
    print(f"{arm:5s} test_acc by step: {curve}")

"""
End-to-end explainability transfer
==================================

Runs the full pipeline for one (source, target) pair: synthetic domains,
pretraining, finetuning, exact Shapley supervision on the source, the
(alpha, lambda2) sweep and the selected point.

    python scripts/transfer_pipeline.py [config.ini] [out_dir]

The shipped default config takes several minutes on a laptop.
"""
import sys
from pathlib import Path

from xferlab.config import load_config
from xferlab.pipeline import normalize, run_pipeline

root = Path(__file__).resolve().parents[1]
config = Path(sys.argv[1]) if len(sys.argv) > 1 else root / "configs" / "default.ini"
out = Path(sys.argv[2]) if len(sys.argv) > 2 else root / "runs" / config.stem

cfg = load_config(config)
res = run_pipeline(cfg, out, resume=True)

ref = res.reference
print(f"reference {res.target}-ft: accuracy {ref.accuracy:.3f}  e_rmse {ref.e_rmse:.4f}  "
      f"iou@10 {ref.iou_at_10:.3f}")

# one line per grid point, normalized against the target model
print("alpha  lambda2  accuracy  e_rmse  iou@10")
for o in res.outcomes:
    n = normalize(o.report, ref)
    mark = "  <- selected" if o is res.selected else ""
    print(f"{o.alpha:5.2f}  {o.lambda2:7.2f}  {n.accuracy:8.3f}  {n.e_rmse:6.3f}  "
          f"{n.iou_at_10:6.3f}{mark}")

print("results written to", out / "results")

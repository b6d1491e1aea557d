"""Two-stage training against a single end-to-end model, at a reduced budget.

Stage 1 learns where the sound is (binary masks). Stage 2 learns what it is
(semantic labels), taking the sounding mask as a prior: the ground truth during
training, the stage-1 prediction or a corrupted copy at test time. The
end-to-end baseline gets semantic labels only.

The default budget here is small so the script finishes in a few minutes; the
acceptance suite trains the full default configuration.
"""
import argparse
import logging

from aavs.pipeline import (ExperimentConfig, Stage1Prior, evaluate, make_split, prior_provider, train_end2end,
                           train_stage1, train_stage2)

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--steps", type=int, default=600)
parser.add_argument("--train-clips", type=int, default=200)
parser.add_argument("--eval-clips", type=int, default=50)
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = ExperimentConfig().replace(**{"train.steps": args.steps, "train.log_every": 200,
                                    "data.train_clips": args.train_clips, "data.eval_clips": args.eval_clips})
train, manifest = make_split(cfg, "train")
test, _ = make_split(cfg, "test")

stage1 = train_stage1(cfg, train, manifest)
stage2 = train_stage2(cfg, train, manifest)
e2e = train_end2end(cfg.replace(strategy="E2E"), train, manifest)

print(f"\nstage-1 binary mIoU: {evaluate(stage1.build_model(), test).miou:.4f}\n")
model = stage2.build_model()
rows = [(name, evaluate(model, test, prior)) for name, prior in (
    ("stones + ground-truth prior", prior_provider("oracle")),
    ("stones + prior at IoU 0.85", prior_provider("corrupted:0.85")),
    ("stones + stage-1 prior", Stage1Prior(stage1)),
    ("stones + prior at IoU 0.4", prior_provider("corrupted:0.4")),
)]
rows.insert(2, ("end-to-end", evaluate(e2e.build_model(), test)))
print(f"{'model':<30}{'mIoU':>8}{'F':>8}")
for name, rep in rows:
    print(f"{name:<30}{rep.miou:>8.4f}{rep.fscore:>8.4f}")

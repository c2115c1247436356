"""A small campaign, scored the way the command line scores it.

    python demos/03_campaign.py [per_class]

Attacks ``per_class`` validation images of every class (the target's own
mistakes are dropped first), then reports accuracy and confidence before and
after, FID, class preservation and the transfer of the attack to the other
classifiers.
"""

import sys
from dataclasses import replace

from aptbench.config import RunConfig
from aptbench.experiments import campaign_for, evaluate_run, summarize
from aptbench.workspace import Workspace

per_class = int(sys.argv[1]) if len(sys.argv) > 1 else 2
cfg = RunConfig()
cfg = replace(cfg, campaign=replace(cfg.campaign, per_class=per_class))
ws = Workspace.from_config(cfg)
c = campaign_for(ws, cfg, tag="demo")
print(f"campaign {c.campaign_id}: {c.info['counts']}")
for key, value in summarize(c, cfg.attack.target, cfg.campaign.oracle).items():
    print(f"  {key}: {value}")

report, files = evaluate_run(ws, cfg, c.campaign_id)
for cid, row in sorted(report["attacked"].items()):
    clean = report["clean"][cid]
    print(f"  {cid:>7}: acc {clean['acc']:.3f} -> {row['acc']:.3f}, conf {clean['conf']:.3f} -> {row['conf']:.3f}")
print("  FID:", report["fid"])
print("\n".join(str(f) for f in files))

"""
End to end on a small world
===========================

Train both image encoders, the skip-gram model and the attentive fusion,
then look at cluster recovery and indicator regression. Sizes are cut down
so this finishes in well under a minute.
"""

from regioncl.config import PipelineConfig, parse_config
from regioncl.evaluation import ablation_suite
from regioncl.pipeline import run_pipeline

cfg = parse_config(
    """
    world.n_regions = 60
    world.image_shape = 3,16,16
    encoder.epochs = 4
    text.epochs = 3
    align.epochs = 40
    """,
    PipelineConfig(),
).with_seed(2)

result = run_pipeline(cfg, variants=("add_svrv", "concat", "full"))

print("SV triplet loss by epoch:", [round(v, 3) for v in result.visual["SV"].history])
print("InfoNCE first/last epoch:", round(result.fusion.history[0], 3), round(result.fusion.history[-1], 3))

betas = list(result.fusion.betas.values())
print("mean attention on SV:", round(sum(b[0] for b in betas) / len(betas), 3))
print("ARI of k-means on PCA coordinates vs planted clusters:", round(result.clusters.ari, 3))

report = ablation_suite(result.ablation_rows)
for variant, r2 in report.mean_r2.items():
    print(f"{variant:10s} mean test R^2 {r2:.3f}")

"""Smallest possible tour: build a synthetic MoE, compress it, read the report.

The compressed model stores one shared base per role plus a low-rank delta
per expert; the report carries the loss change and the parameter census.
"""

from d2moe import CompressionConfig, compress, evaluate, gen_fixture

fx = gen_fixture(seed=0)
print(f"fixture: {fx.model.layers[0].n_experts} experts, "
      f"d_model={fx.model.layers[0].d_model}, "
      f"hidden={fx.model.layers[0].hidden}, tokens={fx.n_tokens}")

cfg = CompressionConfig(merge_method="fisher", delta_ratio=0.5, sparsity=0.4)
compressed, report = compress(cfg, fx.model, fx.tokens, labels=fx.labels)

print(f"calibration loss: {report.loss_before:.5f} -> {report.loss_after:.5f} "
      f"(+{report.loss_after - report.loss_before:.5f})")

rec = report.layers[0]
p = rec.params
print(f"ranks: {rec.rank}")
print(f"stored expert params: {p.original_static:.0f} -> {p.census_static} "
      f"({p.census_static / p.original_static:.1%} of dense)")
print(f"active per token:     {p.original_active:.0f} -> {p.census_active_per_token:.0f}")

# the compressed model is a drop-in for evaluation
again = evaluate(compressed, fx.tokens, fx.labels, batch_size=cfg.batch_size)
print(f"re-evaluated loss: {again.loss:.5f} (matches report: "
      f"{abs(again.loss - report.loss_after) < 1e-12})")

"""Trade storage against quality by sweeping the delta rank ratio.

At ratio p each expert keeps p of its dense parameter count in (u, v)
factors; the frontier shows loss recovering as rank grows, and the lossless
mode confirms the decomposition itself is exact.
"""

import numpy as np

from d2moe import CompressionConfig, compress, gen_fixture, ratio_frontier
from d2moe.moe import moe_forward_dense
from d2moe.runtime import compressed_model_forward

fx = gen_fixture(seed=0)
cfg = CompressionConfig(sparsity=0.0)

points = ratio_frontier(fx.model, fx.tokens, fx.labels, cfg,
                        ratios=(0.125, 0.25, 0.5, 0.75, 1.0))
print(f"{'ratio':>6} {'loss':>9} {'stored':>8}")
for ratio, loss, stored in points:
    print(f"{ratio:>6.3f} {loss:>9.5f} {stored:>8d}")

# full-rank factors reproduce the dense network to machine precision
lossless_cfg = CompressionConfig(rank_mode="lossless", sparsity=0.0)
compressed, rep = compress(lossless_cfg, fx.model, fx.tokens, labels=fx.labels)
dense, _ = moe_forward_dense(fx.model, fx.tokens)
approx, _ = compressed_model_forward(compressed, fx.tokens)
dev = np.linalg.norm(approx - dense, axis=0) / np.linalg.norm(dense, axis=0)
print(f"\nlossless mode: max per-token logit deviation {dev.max():.2e}, "
      f"loss delta {abs(rep.loss_after - rep.loss_before):.2e}")

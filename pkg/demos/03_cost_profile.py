"""Where do the parameters and FLOPs go?

Counts cover one forward pass of a single image.  The bench table swaps the
attention in stages 3 and 4 between four kinds and keeps everything else.
"""
from cinformer.config import Config
from cinformer.profile import bench, profile

cfg = Config()
rep = profile(cfg)
print(f"{'component':<10} {'params':>10} {'FLOPs':>14}")
for comp in ("stem", "fpn", "encoder", "decoder", "total"):
    print(f"{comp:<10} {rep[comp]['params']:>10,} {rep[comp]['flops']:>14,}")
print("attention FLOPs per stage:", rep["attention_flops"])

print()
for row in bench(cfg):
    print(f"{row['kind']:<18} attention {row['attention_flops']:>10,}   total {row['total_flops']:>12,}")

# At 64 px the last two grids are 4x4 and 2x2, no larger than a 7x7 window,
# so windowed and global attention cost the same.  A bigger input separates them.
big = Config()
big.model.input_size = 256
big.model.attention.k_tokens = [None, None, 32, 12]
print("\nat 256 px:")
for row in bench(big):
    print(f"{row['kind']:<18} attention {row['attention_flops']:>12,}")

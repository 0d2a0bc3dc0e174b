"""Which tokens does Top-K attention look at?

Queries are ranked by population variance, once over tokens and once over
channels.  Only the winners take part in attention; everything else gets a
zero update.
"""
import numpy as np

from cinformer.attention import TokenMap, compute_selection, init_topk_attention, topk_attention
from cinformer.nn import ParamStore
from cinformer.rng import SeededRng

rng = np.random.default_rng(0)

# a 4x4 grid of 8-channel tokens; three of them carry a strong "defect" signal
x = 0.1 * rng.standard_normal((1, 16, 8))
x[0, [5, 6, 10]] += rng.standard_normal((3, 8)) * 2.0

sel = compute_selection(x, k_tokens=4, k_channels=4)
print("token variances:\n", sel.token_variances[0].reshape(4, 4).round(3))
print("selected tokens :", sel.token_indexes[0].tolist())
print("selected channels:", sel.channel_indexes[0].tolist())

# the block itself selects on its own query projection
store = ParamStore()
init_topk_attention(store, SeededRng(1), "attn", 8)
trace = {}
out = topk_attention(TokenMap(x.astype(np.float32), 4, 4), store, "attn", 4, 4, trace=trace)
picked = trace["attn"]["selection"].token_indexes[0]
touched = np.flatnonzero(np.abs(out.values.data[0]).sum(axis=1) > 0)
print("\nblock picked tokens", sorted(picked.tolist()), "and updated", touched.tolist())
print("gate values (one per key token):", trace["attn"]["gate"][0].round(3))

# gamma scales the gate.  At zero the block adds nothing at all.
store["attn.gamma"].data[:] = 0.0
out = topk_attention(TokenMap(x.astype(np.float32), 4, 4), store, "attn", 4, 4)
print("with gamma = 0 the update is all zeros:", bool(np.all(out.values.data == 0)))

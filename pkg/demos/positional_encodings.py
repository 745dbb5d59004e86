"""
Three ways to tell a model where it is
======================================

NoPos adds nothing, the sinusoidal scheme adds a fixed vector to the input,
and rotary embeddings rotate query/key pairs so their dot product only sees
the offset between positions.
"""

import numpy as np

from lcasr.posenc import RotaryParams, SinusoidalParams, make_scheme, resolve_theta, rotary_apply, sinusoidal_add

rng = np.random.default_rng(1)
d = 64
q, k = rng.standard_normal(d), rng.standard_normal(d)

# Rotation keeps the vector length.
rot = RotaryParams(resolve_theta("long"), d)
print("norm before/after:", np.linalg.norm(q), np.linalg.norm(rotary_apply(q, 12345, rot)))

# Shifting both positions by the same amount leaves the score unchanged.
for shift in (0, 1000, 100_000):
    score = rotary_apply(q, 40 + shift, rot) @ rotary_apply(k, 10 + shift, rot)
    print(f"shift {shift:>6}: q.k = {score:.10f}")

# A larger base frequency makes the slowest pair rotate more slowly,
# which is what longer contexts want.
for theta in (1e4, 1.5e6):
    slowest = RotaryParams(theta, d).freqs[-1]
    print(f"theta {theta:>9.0f}: slowest pair turns once every {2 * np.pi / slowest:,.0f} positions")

# The sinusoidal scheme is a pure translation of the input.
sin = SinusoidalParams.init(d)
print("added vector at n=3 is input independent:",
      np.allclose(sinusoidal_add(q, 3, sin) - q, sinusoidal_add(k, 3, sin) - k))

print("NoPos leaves input untouched:", np.array_equal(make_scheme("nopos", d).apply_input(q, 0), q))

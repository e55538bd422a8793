"""Split depth estimation and gated navigation for bandwidth-constrained drones.

The package is organised around a small numpy autodiff engine (`tensor`,
`nn`), a synthetic box world with a ray-cast camera (`world`), depth network
construction and two-stage distillation (`depthnet`, `distill`), TD3
navigation and branch-gating policies (`policy`, `gate`), an affine uint8
codec plus a framed TCP runtime (`quantize`, `wire`, `nodes`), and an
experiment harness (`config`, `pipeline`, `cli`).
"""

__version__ = "0.1.0"

"""Solve for a nuisance path that makes the non-symmetric exponential model orthogonal.

Along the path the expected cross information between theta and the gamma
parameters vanishes; the shape stays put and the rate follows sqrt(theta / 2)
from the starting point (theta, shape, rate) = (2, 1.5, 1).

Run with ``python demos/orthogonal_path.py``.
"""

import numpy as np

from misfit.conditions import orthogonalize
from misfit.mixture import exponential_gamma_information


def main():
    info = lambda phi: exponential_gamma_information(False, *phi)
    psi = np.linspace(2.0, 6.0, 9)
    path = orthogonalize(info, [2.0, 1.5, 1.0], psi)
    print(f"initial |cross info| {np.max(np.abs(path.initial_cross_info)):.3f}\n")
    print(f"{'theta':>6} {'shape':>8} {'rate':>10} {'sqrt(theta/2)':>14} {'|cross info|':>13}")
    for (th, shape, rate), cross in zip(path.rows(), path.cross_info):
        print(f"{th:6.2f} {shape:8.4f} {rate:10.6f} {np.sqrt(th / 2):14.6f} {np.max(np.abs(cross)):13.1e}")


if __name__ == "__main__":
    main()

"""Hard-sphere gas in a slab with diffuse walls: particle simulation,
collision-tree Monte Carlo and a Boltzmann mild-form solver."""

__version__ = "0.1.0"

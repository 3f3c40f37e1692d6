"""District-scale building energy simulation.

Footprints and terrain become a triangle scene, rays through a BVH give
shading masks and view factors, and a two-node RC model per building runs
through the weather series across parallel worker lanes.
"""

__version__ = "0.1.0"

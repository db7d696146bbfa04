"""Free-viewpoint rendering of an articulated subject from a single-camera capture.

The package is organised as a small numpy-based library:

- ``autodiff``   reverse-mode tensor engine + Adam + gradcheck
- ``fused``      cache-tiled fixed-width MLP evaluator and benchmark
- ``skeleton``   articulated skeleton, forward kinematics, per-bone motion bases
- ``capture``    synthetic capsule-body raytracer producing training datasets
- ``motion``     pose refiner, blend-weight volume, inverse-skinning warp,
                 windowed positional encoding, residual offset field
- ``render``     canonical-space radiance field and volume compositing
- ``training``   patch-based optimisation loop, metrics, held-out evaluation
- ``cli``        command line entry points (synth / train / render / eval /
                 bench / serve)
- ``service``    HTTP render service consumed by the browser viewer
"""

__version__ = "0.1.0"

"""Finite-difference checks of every module boundary.

Each block of the model (graph expression, both projections, the toy language
model and the loss) is turned into a scalar and compared against central
differences. A deliberately broken gradient shows what a failure looks like.
"""

from sgexpress.diagnostics import format_suite, gradcheck_config, gradcheck_suite
from sgexpress import config as cfg
from sgexpress.model import SceneGraphVLM
from sgexpress.training import TRAINABLE_PATTERNS, matches

model = SceneGraphVLM(cfg.model_config(gradcheck_config()))
print(f"small model: {model.n_parameters()} parameters\n")

print(format_suite(gradcheck_suite(model)))

print("same suite with one corrupted gradient in the graph expression:")
print(format_suite(gradcheck_suite(model, fault="sge")))

# only what stage 2 trains (graph expression, graph projection, sentinels)
reports = gradcheck_suite(model, live=lambda n: matches(n, TRAINABLE_PATTERNS[2]), include_inputs=False)
print("stage 2 parameters only:")
print(format_suite([(n, r) for n, r in reports if r.n_checked]))

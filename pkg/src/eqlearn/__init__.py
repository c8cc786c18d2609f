"""eqlearn: sparse analytic model learning from data plus prior-knowledge constraints.

A heterogeneous network of elementary-function units (with copy units and
guarded division) is trained with an adaptively weighted multi-term loss under
an epoch-wise restart schedule; the surviving active subgraph is extracted and
simplified into an analytic expression.
"""

__version__ = "0.1.0"

from .extract import (eval_expression, parse, render, simplify,  # noqa: F401
                      to_expression)
from .netgraph import (ArchitectureSpec, Network, UnitKind,  # noqa: F401
                       activity, build_network, forward, forward_batch,
                       general_architecture, informed_architecture,
                       verify_weight_count)
from .priors import (Constraint, ConstraintKind, ConstraintSet,  # noqa: F401
                     generate_samples, residual, violation_rmse)
from .problems import ProblemBundle, generate, load_bundle, save_bundle  # noqa: F401
from .trainer import (ModelSnapshot, StageSchedule, TrainSettings,  # noqa: F401
                      VariantConfig, is_nontrivial, run)

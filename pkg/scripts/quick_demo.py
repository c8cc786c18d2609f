"""Train one scaled resistors run end to end and print the recovered formula.

Takes about half a minute on a laptop core.  The printed expression should be
structurally close to r1*r2/(r1 + r2).
"""

import numpy as np

from eqlearn.extract import render, simplify, to_expression
from eqlearn.harness import evaluate_model
from eqlearn.problems import generate
from eqlearn.trainer import (StageSchedule, TrainSettings, VariantConfig, run)


def main() -> None:
    bundle = generate("resistors", seed=1, size=500)
    schedule = StageSchedule(n_init=1000, n_explore=20, n_focus=980,
                             epochs=8, n_final=1000)
    result = run(bundle, schedule, VariantConfig.from_code("ACYE"), seed=0,
                 settings=TrainSettings(lr=0.02))
    net = result.model_network()
    expr = simplify(to_expression(net))
    print("recovered model:")
    print("   ", render(expr, digits=5))
    print("complexity:", result.model_star.complexity)
    metrics = evaluate_model(net, bundle)
    for key in ("rmse_int", "rmse_ext", "rmse_int_ext"):
        print(f"{key}: {metrics[key]:.5f}")
    for name, rho in metrics["rho_c"].items():
        print(f"constraint {name}: {rho:.2e}")
    truth = bundle.reference_eval()
    probe = np.array([[10.0, 10.0], [5.0, 15.0]])
    from eqlearn.harness import as_model_eval
    model = as_model_eval(net)
    for row in probe:
        print(f"f({row[0]:g}, {row[1]:g}) = {model(row[None])[0]:.4f}  "
              f"(truth {truth(row[None])[0]:.4f})")


if __name__ == "__main__":
    main()

import logging
from pathlib import Path

from agents.orchestrator import OrchestratorAgent
from core.config import load_config
from core.runtime import configure


PROJECT_ROOT = Path(__file__).resolve().parents[1]


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    config = load_config(
        PROJECT_ROOT / "configs" / "desk.cfg",
        # short run: a few minutes on a laptop, far from converged
        {"prior.log_every": "200", "train.log_every": "100"},
    )
    configure(threads=config.run.threads, deterministic=config.run.deterministic, precision=config.run.precision)

    orchestrator = OrchestratorAgent(
        config=config,
        work_dir=PROJECT_ROOT / "data" / "demo",
        train_seeds=range(0, 20),
        test_seeds=range(1000, 1005),
        prior_iterations=500,
        detector_iterations=300,
    )
    result = orchestrator.run()

    print("\n=== DETECTION SUMMARY ===")
    for threshold, value in result.evaluation.map.items():
        print(f"mAP@{threshold:g}: {value:.3f}")
    print(result.evaluation.per_class.to_string(index=False))

    print("\n=== RUN SUMMARY (EXPLANATION AGENT) ===")
    for line in [l for l in result.logs if "[Summary]" in l]:
        print(line.replace("[Summary] ", ""))


if __name__ == "__main__":
    main()

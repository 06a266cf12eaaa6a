import argparse
from pathlib import Path

import torch

from py_dder.config import Settings
from py_dder.data import load_datasets
from py_dder.harness.checkpoint import stage_checkpoint_path
from py_dder.harness.evaluation import evaluate_matrix, forgetting_report
from py_dder.harness.report import emit_report, parameter_summary
from py_dder.pipeline import infer, run_sequence


def main(variant: str, out_dir: Path):
    """
    Trains a small run over clean -> FGSM -> PGD on the synthetic desk
    dataset, evaluates every stage checkpoint and writes the report.
    """
    settings = Settings(
        variant=variant,
        num_classes=10,
        image_size=16,
        train_size=1000,
        test_size=300,
        feature_dim=64,
        pretrain_epochs=10,
        epochs=5,
        asn_epochs=10,
        embed_dim=64,
        text_hidden=64,
        steps=5,
        out_dir=out_dir,
        cache_dir=out_dir / "cache",
    )
    print(f"Training variant {variant} over {settings.sequence}...")

    train, test = load_datasets(settings)
    state, results = run_sequence(settings, out_dir, train=train, test=test)
    for result in results:
        print(
            f"Stage {result.stage} ({result.attack}): loss {result.train_loss[-1]:.4f}, "
            f"{result.param_delta} new router parameters"
        )

    # The trained state routes each input through the router the sentinel picks.
    images, labels = test.tensors
    with torch.no_grad():
        predictions = infer(state, images[:100])
    print(f"Clean accuracy on 100 test images: {(predictions == labels[:100]).float().mean().item():.3f}")

    checkpoints = {
        stage: stage_checkpoint_path(out_dir, stage) for stage in range(len(settings.attack_sequence))
    }
    matrix = evaluate_matrix(checkpoints, test, settings.attack_sequence, mode="transfer")
    report = forgetting_report(matrix)
    emit_report(matrix, report, out_dir / "report", summary=parameter_summary(state))

    for label in matrix.columns:
        print(f"{label}: final {report.final_accuracy[label]:.3f}, forgetting {report.forgetting[label]:.3f}")
    print(f"Report written to {out_dir / 'report'}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run a small continual adversarial training example.")
    parser.add_argument(
        "--variant",
        choices=["a", "b", "c", "d", "e"],
        default="e",
        help="Ablation variant: 'a' single adapter baseline up to 'e' the full method.",
    )
    parser.add_argument("--out", type=Path, default=Path("runs/example"), help="Run directory.")
    args = parser.parse_args()

    main(variant=args.variant, out_dir=args.out)

"""Provides adversarial attack implementations and cached stage datasets."""

from .base import Attack, NoAttack
from .gradient import BIM, FGSM, PGD, bim, build_attack, fgsm, pgd

__all__ = ["BIM", "FGSM", "PGD", "Attack", "NoAttack", "bim", "build_attack", "fgsm", "pgd"]

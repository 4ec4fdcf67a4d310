"""Differentiable image-retouching adversarial attacks on a toy classifier."""

from retouchattack.imagecore import ImageTensor, load_png, save_png
from retouchattack.retouchops import OpKind
from retouchattack.palettemask import PaletteMasker
from retouchattack.drm import DecisionTables, RetouchPlan
from retouchattack.style import StatisticStyle, PredictorStyle
from retouchattack.victim import ToyVictim
from retouchattack.attack import AttackConfig, AttackResult, RetouchAttack, run_attack

__all__ = [
    "ImageTensor",
    "load_png",
    "save_png",
    "OpKind",
    "PaletteMasker",
    "DecisionTables",
    "RetouchPlan",
    "StatisticStyle",
    "PredictorStyle",
    "ToyVictim",
    "AttackConfig",
    "AttackResult",
    "RetouchAttack",
    "run_attack",
]

__version__ = "0.1.0"

"""
FEWSHOT-AD
==========
Few-shot anomaly detection with a customized conditional diffusion model.

Pipeline: customize a small denoiser on k normal references, personalize
each query one-to-normal, then fuse query-vs-personalized, query-vs-bank and
query-vs-text evidence into one anomaly score.
"""

from . import errors
from . import imaging
from . import container
from . import schedule_core
from . import prompts
from . import denoiser
from . import synth
from . import encoder
from . import customization
from . import bank
from . import personalization
from . import scorer
from . import datasets
from . import config
from . import evaluation
from . import figures
from . import cli

__version__ = config.CODE_VERSION

__all__ = ['errors', 'imaging', 'container', 'schedule_core', 'prompts', 'denoiser', 'synth',
           'encoder', 'customization', 'bank', 'personalization', 'scorer', 'datasets',
           'config', 'evaluation', 'figures', 'cli']

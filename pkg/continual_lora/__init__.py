# Continual LoRA personalization toolkit
__version__ = "1.0.0"

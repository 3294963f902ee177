"""CroPA Workbench - cross-prompt adversarial attacks on vision-language models."""
__version__ = "1.0.0"

"""Binary facial pain classification benchmark: data, training, agreement and explanations."""

__version__ = "0.1.0"

"""Sequential item ranking from implicit feedback, with optional visual and
textual content features feeding both a recurrent model and a ladder of
static baselines."""

__version__ = "0.1.0"

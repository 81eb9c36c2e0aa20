"""Single- and multi-channel end-to-end neural diarization with mutual learning."""

__version__ = "0.1.0"

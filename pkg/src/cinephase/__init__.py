"""ECG-free cardiac phase and end-diastolic frame detection for cine sequences."""

__version__ = "0.1.0"

"""Multi-year agricultural parcel classification on pixel-set time series:
attention encoders, rotation-aware heads, CRF and calibration baselines,
and rotation-structure analytics, all on synthetic data."""

__version__ = "0.1.0"

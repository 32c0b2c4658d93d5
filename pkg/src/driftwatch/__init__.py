"""driftwatch: degradation analytics for dual-channel low-cost PM2.5
sensors. Covers QC and hourly aggregation, reference collocation,
dual-channel disagreement flagging, permanent-degradation classification,
correction model fitting with leave-one-sensor-out validation, and
degradation-trend estimation (linear, interaction, and penalized-spline
GAM with cluster bootstrap bands)."""

__version__ = "0.1.0"

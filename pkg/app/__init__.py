# CAAC Lab - confidence-aware attention calibration on a planted-bias world
# Toy decoder, VTC/AAR inference-time interventions, relevancy analysis

__version__ = "0.1.0"

"""Joint modelling of survival outcomes and the clinical observation
process (encounter timing + test missingness) on irregular multivariate
sequences, plus a synthetic presence-shift benchmark and transfer-
evaluation harness."""

__version__ = "0.1.0"

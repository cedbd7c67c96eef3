"""Figure rendering over chmm-evidence result CSVs (pure views, no recomputation)."""

from .figures import model_averaged_densities, plot_posteriors, plot_state_heatmap
from .tables import SchemaError

__version__ = "0.1.0"

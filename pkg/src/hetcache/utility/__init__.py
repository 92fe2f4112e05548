from ..expint import exp_integral
from .evaluate import (
    delivery_probabilities,
    local_hit_utilities,
    location_weights,
    min_utility,
    network_utility,
    region_file_utilities,
    user_file_utilities,
    user_utilities,
    user_utility,
)
from .radio import RadioConfig, RadioError, backhaul_rate, conditional_rate, success_integrand
from .tables import QuadratureError, UtilityTable, compute_utility_tables, point_utilities, table_key

__all__ = [
    "RadioConfig",
    "RadioError",
    "UtilityTable",
    "QuadratureError",
    "backhaul_rate",
    "compute_utility_tables",
    "conditional_rate",
    "delivery_probabilities",
    "exp_integral",
    "local_hit_utilities",
    "location_weights",
    "min_utility",
    "network_utility",
    "point_utilities",
    "region_file_utilities",
    "success_integrand",
    "table_key",
    "user_file_utilities",
    "user_utilities",
    "user_utility",
]

"""Natural nonequilibrium states of a small quantum system between finite reservoirs."""
from .evolution import (CoupledPropagator, FreePropagator, coupled_evolve, echo_minus,
                        echo_minus_integral, echo_plus, echo_plus_integral, free_evolve)
from .kms import FactoredOperator, kms_function, modular_flow, multi_strip_check
from .model import (ConfigError, CouplingSchedule, CouplingTerm, Envelope, Scenario, build_scenario,
                    default_scenario, energy_current, load_scenario, site_pauli)
from .moller import (a5_diagnostic, moller_minus, moller_plus, nnes_density, nnes_expect,
                     oracle_expect)
from .opcore import Operator, SpaceLayout, commutator, embed, op_norm, tensor
from .response import dyson_term, lambda_derivative_propagator, linear_response, steady_response

__all__ = [
    "CoupledPropagator", "FreePropagator", "coupled_evolve", "echo_minus", "echo_minus_integral",
    "echo_plus", "echo_plus_integral", "free_evolve", "FactoredOperator", "kms_function",
    "modular_flow", "multi_strip_check", "ConfigError", "CouplingSchedule", "CouplingTerm",
    "Envelope", "Scenario", "build_scenario", "default_scenario", "energy_current", "load_scenario",
    "site_pauli", "a5_diagnostic", "moller_minus", "moller_plus", "nnes_density", "nnes_expect",
    "oracle_expect", "Operator", "SpaceLayout", "commutator", "embed", "op_norm", "tensor",
    "dyson_term", "lambda_derivative_propagator", "linear_response", "steady_response",
]

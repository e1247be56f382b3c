"""Power flow with voltage and frequency regulation solved as a mixed complementarity problem."""

from .blcp import BLCPOptions, BoxedLCP, brute_force_blcp, solve_blcp
from .formulation import PowerFlowMCP, RegulationConfig, assemble, regulation_summary
from .grid import GridCase, GridState, SwitchedShunt, TapDevice
from .matpower_io import load_case, parse_case, write_case
from .mcp import Bounds, MCPProblem, is_solution, natural_residual
from .newton import SolverOptions, SolveReport, solve

__version__ = "0.1.0"

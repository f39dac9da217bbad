"""Operator-graph toolkit for small-scale computational imaging studies."""

from .graph import (
    GraphError,
    GraphOperator,
    GraphSpec,
    NodeSpec,
    adjoint_check_graph,
    compile_graph,
    fidelity_error,
    graph_hash,
    make_spec,
    parse_spec,
    serialize_spec,
)
from .primitives import (
    AdjointReport,
    PrimitiveError,
    PrimitiveKind,
    dot_product_test,
    lipschitz_bound,
    make_primitive,
)
from .registry import (
    CANONICAL_ORDER,
    Registry,
    RegistryError,
    basis_growth,
    default_registry,
    load_registry,
)
from .tensor import Rng, Tensor, dot, gaussian, load_tensor, save_tensor, tensor

__version__ = "0.3.0"

__all__ = [
    "AdjointReport",
    "CANONICAL_ORDER",
    "GraphError",
    "GraphOperator",
    "GraphSpec",
    "NodeSpec",
    "PrimitiveError",
    "PrimitiveKind",
    "Registry",
    "RegistryError",
    "Rng",
    "Tensor",
    "adjoint_check_graph",
    "basis_growth",
    "compile_graph",
    "default_registry",
    "dot",
    "dot_product_test",
    "fidelity_error",
    "gaussian",
    "graph_hash",
    "lipschitz_bound",
    "load_registry",
    "load_tensor",
    "make_primitive",
    "make_spec",
    "parse_spec",
    "save_tensor",
    "serialize_spec",
    "tensor",
    "__version__",
]

from .gradcheck import evaluate_graph, finite_difference_check
from .rng import make_generator, normal
from .tensor import (
    GraphError,
    MatmulFlopCounter,
    NumericError,
    Tensor,
    concat,
    count_matmul_flops,
    embedding_lookup,
    next_token_cross_entropy,
    no_grad,
)

__all__ = [
    "GraphError",
    "MatmulFlopCounter",
    "NumericError",
    "Tensor",
    "concat",
    "count_matmul_flops",
    "embedding_lookup",
    "evaluate_graph",
    "finite_difference_check",
    "make_generator",
    "next_token_cross_entropy",
    "no_grad",
    "normal",
]

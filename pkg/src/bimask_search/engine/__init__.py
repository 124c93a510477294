from bimask_search.engine.tensor import (
    EPS,
    EngineError,
    GraphError,
    MacCounter,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
)

__all__ = [
    "EPS",
    "EngineError",
    "GraphError",
    "MacCounter",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "as_tensor",
]

# flake8: noqa
from typing import Any, Callable, Union

from numpy import bool_, complex128, float64, int64
from numpy.typing import NDArray

NDArrayFloat = NDArray[float64]
NDArrayInt = NDArray[int64]
NDArrayComplex = NDArray[complex128]
NDArrayBool = NDArray[bool_]
ArrayLike = Union[NDArrayFloat, Any]
PointFunction = Callable[[NDArrayFloat, NDArrayFloat], Any]
PairFunction = Callable[[NDArrayFloat, NDArrayFloat, NDArrayFloat, NDArrayFloat], Any]

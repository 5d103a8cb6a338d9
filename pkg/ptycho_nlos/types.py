from typing import TypeVar

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel

ComplexArray = NDArray[np.complex128]
RealArray = NDArray[np.float64]
BoolArray = NDArray[np.bool_]

GridShape = tuple[int, int]

# (dx, dy) pairs, one row per frame
ShiftTable = NDArray[np.float64]

ConfigType = TypeVar("ConfigType", bound=BaseModel)
PayloadType = TypeVar("PayloadType", bound=BaseModel)

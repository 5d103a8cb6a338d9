from typing import Any, Optional

from ptycho_nlos.enums import ReconEvent
from ptycho_nlos.state import ReconState
from ptycho_nlos.types import PayloadType


class ProcessorBase:
    """
    Observer of a reconstruction run.

    The controller calls `process` once after initialization, after every
    epoch and once at the end, always with the live state. Processors must
    not modify the state.
    """

    def __init__(self):
        pass

    def process(self, event: ReconEvent, state: ReconState, payload: Optional[PayloadType],
                context: dict[Any, Any]):
        raise NotImplementedError

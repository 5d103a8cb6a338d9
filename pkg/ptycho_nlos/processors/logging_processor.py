import logging
from typing import Any, Optional

from ptycho_nlos.enums import ReconEvent
from ptycho_nlos.processors.base import ProcessorBase
from ptycho_nlos.state import ReconState
from ptycho_nlos.types import PayloadType


class LoggingProcessor(ProcessorBase):
    """Logs the latest residual and its ratio to the initial misfit at every event."""

    def __init__(self):
        super().__init__()
        self.logger = logging.getLogger(__name__)

    @staticmethod
    def _progress(state: ReconState) -> str:
        residual = state.residual_history[-1] if state.residual_history else state.initial_residual
        if not state.initial_residual:
            return f"Residual: {residual}"
        return f"Residual: {residual}, Relative: {residual / state.initial_residual:.3g}"

    def process(self, event: ReconEvent, state: ReconState, payload: Optional[PayloadType],
                context: dict[Any, Any]):
        self.logger.info(f"Event: {event.name}, Epoch: {state.epoch}, {self._progress(state)}, Context: {context}")

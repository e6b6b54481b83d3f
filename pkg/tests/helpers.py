"""Test doubles shared across modules."""

import threading

from llmhara.provider import Provider


class Counting(Provider):
    """Wraps a provider and counts calls per stage; optionally crashes on a stage."""

    def __init__(self, inner, crash_on=None):
        super().__init__(max_in_flight=inner.max_in_flight)
        self.inner = inner
        self.model_id = inner.model_id
        self.crash_on = crash_on
        self.calls = {}
        self._lock = threading.Lock()

    def complete(self, request, on_response=None):
        if self.crash_on is not None and request.stage == self.crash_on:
            raise SimulatedCrash(request.stage.value)
        with self._lock:
            self.calls[request.stage.value] = self.calls.get(request.stage.value, 0) + 1
        return self.inner.complete(request, on_response)

    def probe(self, stages=None):
        return self.inner.probe() if stages is None else self.inner.probe(stages)


class SimulatedCrash(BaseException):
    """Stands in for the process being killed; not an Exception so nothing swallows it."""

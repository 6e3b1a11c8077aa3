"""
Sources of LLM responses for graph builds.

FixtureClient replays stored responses; HTTPClient calls a chat-completion
endpoint and can record every exchange so a live run becomes a fixture.
"""
import json
import logging
import os
import threading
from abc import ABC, abstractmethod

import requests

from .askg import action_slug
from .errors import ConfigurationError, ReportIOError

logger = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-3.5-turbo"
FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures")
SYNTHETIC_FIXTURE_DIR = os.path.join(FIXTURE_DIR, "synthetic")


class LLMClient(ABC):
    """Returns the response text for one prompting stage of one action."""

    @abstractmethod
    def complete(self, stage, action, prompt):
        """
        Args:
            stage (int): 1 for entities and relations, 2 for sentence completion
            action (str): Class name
            prompt (StructuredPrompt): Request to answer

        Returns:
            str: Raw response text
        """


class FixtureClient(LLMClient):
    """
    Reads `<directory>/<action_slug>/stage<stage>.txt`.

    Attributes:
        directory (str): Fixture root
    """

    def __init__(self, directory=FIXTURE_DIR):
        self.directory = directory

    def path_for(self, stage, action):
        return os.path.join(self.directory, action_slug(action), f"stage{stage}.txt")

    def complete(self, stage, action, prompt):
        path = self.path_for(stage, action)
        try:
            with open(path, encoding="utf-8") as handle:
                return handle.read()
        except OSError as exc:
            raise ReportIOError(f"no stage-{stage} fixture for '{action}': {exc}")

    def actions(self):
        """Slugs of every action with both stages present."""
        if not os.path.isdir(self.directory):
            return []
        return sorted(name for name in os.listdir(self.directory)
                      if all(os.path.isfile(self.path_for(s, name)) for s in (1, 2)))


class HTTPClient(LLMClient):
    """
    Chat-completion client.

    Endpoint, model and key default to STDD_LLM_ENDPOINT, STDD_LLM_MODEL and
    STDD_LLM_API_KEY. With `cache_dir`, each response is saved in the fixture
    layout next to its request and raw response bodies.
    """

    def __init__(self, endpoint=None, model=None, api_key=None, cache_dir=None, timeout=60.0, retries=2):
        self.endpoint = endpoint or os.environ.get("STDD_LLM_ENDPOINT")
        if not self.endpoint:
            raise ConfigurationError("no chat-completion endpoint given", key="endpoint")
        self.model = model or os.environ.get("STDD_LLM_MODEL", DEFAULT_MODEL)
        self.api_key = api_key or os.environ.get("STDD_LLM_API_KEY")
        self.cache_dir = cache_dir
        self.timeout = timeout
        self.retries = retries
        self._session = requests.Session()
        self._lock = threading.Lock()

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def complete(self, stage, action, prompt):
        body = {"model": self.model, "messages": prompt.to_messages(), "temperature": 0.0}
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                response = self._session.post(self.endpoint, json=body, headers=self._headers(),
                                              timeout=self.timeout)
                response.raise_for_status()
                payload = response.json()
                text = payload["choices"][0]["message"]["content"]
                break
            except (requests.RequestException, ValueError, KeyError, IndexError) as exc:
                last_error = exc
                logger.warning("stage-%d request for '%s' failed (attempt %d): %s", stage, action, attempt + 1, exc)
        else:
            raise ReportIOError(f"chat completion for '{action}' stage {stage} failed: {last_error}")
        if self.cache_dir:
            self._record(stage, action, body, payload, text)
        return text

    def _record(self, stage, action, request_body, response_body, text):
        folder = os.path.join(self.cache_dir, action_slug(action))
        with self._lock:
            os.makedirs(folder, exist_ok=True)
            with open(os.path.join(folder, f"stage{stage}.txt"), "w", encoding="utf-8") as handle:
                handle.write(text)
            with open(os.path.join(folder, f"stage{stage}.request.json"), "w", encoding="utf-8") as handle:
                json.dump(request_body, handle, indent=2, ensure_ascii=False)
            with open(os.path.join(folder, f"stage{stage}.response.json"), "w", encoding="utf-8") as handle:
                json.dump(response_body, handle, indent=2, ensure_ascii=False)
        logger.info("cached stage-%d exchange for '%s' in %s", stage, action, folder)

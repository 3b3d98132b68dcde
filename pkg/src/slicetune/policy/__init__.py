"""Actor backends behind one interface."""

from .base import ESTIMATED, EXACT, ActContext, Capabilities, Policy, empirical_action_prob
from .llm import ChatClient, LlmEndpointConfig, LlmEndpointPolicy
from .mock import MockChatServer
from .scripted import MALFORMED_OUTPUT, ScriptedPolicy
from .toy import DEFAULT_DELTAS, FEATURE_NAMES, ToySoftmaxPolicy, softmax

PolicyHandle = Policy

__all__ = [
    "ActContext", "Capabilities", "ChatClient", "DEFAULT_DELTAS", "ESTIMATED", "EXACT",
    "FEATURE_NAMES", "LlmEndpointConfig", "LlmEndpointPolicy", "MALFORMED_OUTPUT",
    "MockChatServer", "Policy", "PolicyHandle", "ScriptedPolicy", "ToySoftmaxPolicy",
    "empirical_action_prob", "softmax",
]

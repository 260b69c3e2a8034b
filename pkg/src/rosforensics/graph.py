"""In-memory registry for a ROS-style publish/subscribe graph.

The registry maps topic names to the nodes that publish and subscribe to
them.  All transitions are pure: each operation takes a GraphState and
returns a new one, leaving the input untouched, so callers own
synchronization and snapshots are free.

By design the unregister operations verify nothing about the caller.  Any
party that can name a registered node can remove its bindings; the
``caller_api`` argument is accepted for API-shape compatibility and never
checked.  That permissiveness is the vulnerability the rest of this
package demonstrates and detects.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace


class ValidationError(ValueError):
    """A graph name, URI or port failed validation."""


# Graph names: non-empty, slash-prefixed, no whitespace or NULs.
_NAME_RE = re.compile(r"^/[^\s\x00]*$")


def validate_graph_name(name: str, what: str = "name") -> str:
    if not isinstance(name, str) or not _NAME_RE.match(name):
        raise ValidationError(f"malformed {what}: {name!r} (must begin with '/', no whitespace)")
    return name


def validate_type_name(type_name: str) -> str:
    if not type_name or any(c.isspace() for c in type_name) or "\x00" in type_name:
        raise ValidationError(f"malformed type name: {type_name!r}")
    return type_name


@dataclass(frozen=True)
class NodeRef:
    """A graph participant: slash-prefixed name plus its RPC endpoint.

    For publishers the endpoint is where subscribers connect for topic
    transport; for subscribers it is where publisher-list updates are
    delivered.
    """

    name: str
    host: str
    port: int

    def __post_init__(self) -> None:
        validate_graph_name(self.name, "node name")
        if not self.host or any(c.isspace() for c in self.host):
            raise ValidationError(f"malformed host: {self.host!r}")
        if not 1 <= int(self.port) <= 65535:
            raise ValidationError(f"port out of range: {self.port!r}")

    @property
    def api_uri(self) -> str:
        return f"{self.host}:{self.port}"


def node_ref(name: str, uri: str) -> NodeRef:
    """Build a NodeRef from a ``host:port`` URI string."""
    host, _, port = uri.rpartition(":")
    if not host or not port.isdigit():
        raise ValidationError(f"malformed uri: {uri!r}")
    return NodeRef(name, host, int(port))


@dataclass(frozen=True)
class TopicBinding:
    """Publisher and subscriber sets for one topic."""

    topic: str
    type_name: str
    publishers: frozenset[NodeRef] = frozenset()
    subscribers: frozenset[NodeRef] = frozenset()

    def __post_init__(self) -> None:
        validate_graph_name(self.topic, "topic")
        validate_type_name(self.type_name)

    @property
    def empty(self) -> bool:
        return not self.publishers and not self.subscribers


@dataclass(frozen=True)
class GraphState:
    """The whole registry: node table plus per-topic bindings.

    Invariants (see verify_integrity): every NodeRef appearing in a binding
    is present in ``nodes`` under its name, and no binding is empty.
    """

    nodes: dict[str, NodeRef] = field(default_factory=dict)
    topics: dict[str, TopicBinding] = field(default_factory=dict)

    @classmethod
    def empty(cls) -> "GraphState":
        return cls({}, {})


def verify_integrity(state: GraphState) -> None:
    """Raise AssertionError if the registry invariants do not hold."""
    referenced: set[str] = set()
    for topic, binding in state.topics.items():
        assert binding.topic == topic, f"binding keyed under wrong topic: {topic}"
        assert not binding.empty, f"empty binding retained for {topic}"
        for ref in binding.publishers | binding.subscribers:
            assert state.nodes.get(ref.name) == ref, f"dangling ref {ref.name} in {topic}"
            referenced.add(ref.name)
        names = [r.name for r in binding.publishers]
        assert len(names) == len(set(names)), f"duplicate publisher name on {topic}"
        names = [r.name for r in binding.subscribers]
        assert len(names) == len(set(names)), f"duplicate subscriber name on {topic}"
    assert referenced == set(state.nodes), "node table out of sync with bindings"


def _admit(state: GraphState, caller: NodeRef) -> GraphState:
    """Record the caller in the node table, rewriting bindings on URI change."""
    existing = state.nodes.get(caller.name)
    if existing == caller:
        return state
    nodes = {**state.nodes, caller.name: caller}
    if existing is None:
        return GraphState(nodes, dict(state.topics))
    # Same name re-registered from a new endpoint: the newest wins everywhere.
    topics = {}
    for topic, binding in state.topics.items():
        pubs = frozenset(caller if r == existing else r for r in binding.publishers)
        subs = frozenset(caller if r == existing else r for r in binding.subscribers)
        topics[topic] = replace(binding, publishers=pubs, subscribers=subs)
    return GraphState(nodes, topics)


def _purge_if_unbound(state: GraphState, name: str) -> GraphState:
    for binding in state.topics.values():
        if any(r.name == name for r in binding.publishers | binding.subscribers):
            return state
    if name not in state.nodes:
        return state
    nodes = dict(state.nodes)
    del nodes[name]
    return GraphState(nodes, dict(state.topics))


def _register(
    state: GraphState, caller: NodeRef, topic: str, type_name: str, role: str
) -> tuple[GraphState, list[str]]:
    validate_graph_name(topic, "topic")
    validate_type_name(type_name)
    state = _admit(state, caller)
    binding = state.topics.get(topic)
    if binding is None:
        binding = TopicBinding(topic, type_name)
    members = getattr(binding, role)
    if caller not in members:
        binding = replace(binding, **{role: members | {caller}})
        state = GraphState(state.nodes, {**state.topics, topic: binding})
    peers = binding.subscribers if role == "publishers" else binding.publishers
    return state, sorted(r.api_uri for r in peers)


def _unregister(
    state: GraphState, caller_name: str, topic: str, role: str
) -> tuple[GraphState, int]:
    # Permissive on purpose: unknown callers and topics are a no-op, and the
    # caller's endpoint is never compared against the registered one.
    binding = state.topics.get(topic)
    if binding is None:
        return state, 0
    ref = next((r for r in getattr(binding, role) if r.name == caller_name), None)
    if ref is None:
        return state, 0
    binding = replace(binding, **{role: getattr(binding, role) - {ref}})
    topics = dict(state.topics)
    if binding.empty:
        del topics[topic]
    else:
        topics[topic] = binding
    state = _purge_if_unbound(GraphState(dict(state.nodes), topics), caller_name)
    return state, 1


def register_publisher(
    state: GraphState, caller: NodeRef, topic: str, type_name: str
) -> tuple[GraphState, list[str]]:
    """Record caller as a publisher of topic; returns current subscriber URIs."""
    return _register(state, caller, topic, type_name, "publishers")


def unregister_publisher(
    state: GraphState, caller_name: str, topic: str, caller_api: str = ""
) -> tuple[GraphState, int]:
    """Remove caller from topic's publishers; returns 1 if a binding was removed.

    ``caller_api`` is deliberately unused: no identity check is performed.
    """
    del caller_api
    return _unregister(state, caller_name, topic, "publishers")


def register_subscriber(
    state: GraphState, caller: NodeRef, topic: str, type_name: str
) -> tuple[GraphState, list[str]]:
    """Record caller as a subscriber of topic; returns current publisher URIs."""
    return _register(state, caller, topic, type_name, "subscribers")


def unregister_subscriber(
    state: GraphState, caller_name: str, topic: str, caller_api: str = ""
) -> tuple[GraphState, int]:
    """Remove caller from topic's subscribers; returns 1 if a binding was removed."""
    del caller_api
    return _unregister(state, caller_name, topic, "subscribers")


def system_state(
    state: GraphState,
) -> tuple[list[tuple[str, list[str]]], list[tuple[str, list[str]]]]:
    """Publisher and subscriber rosters, fully sorted for stable output.

    Topics with no members in a role are omitted from that role's list.
    """
    pubs = []
    subs = []
    for topic in sorted(state.topics):
        binding = state.topics[topic]
        if binding.publishers:
            pubs.append((topic, sorted(r.name for r in binding.publishers)))
        if binding.subscribers:
            subs.append((topic, sorted(r.name for r in binding.subscribers)))
    return pubs, subs


def lookup_node(state: GraphState, name: str) -> NodeRef | None:
    return state.nodes.get(name)


def node_names(state: GraphState) -> list[str]:
    return sorted(state.nodes)

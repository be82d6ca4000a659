"""Synthetic host events and sensor alerts, one observation window at a time.

Entity references are ``"<type>:h<host>:<name>"`` with type one of process,
file, socket, user, host, alert.  Benign activity is drawn from small
per-host entity pools; attack activity comes from the per-stage templates in
``data/templates.yaml``.

Export format: one JSON object per line with keys in the fixed order
``timestamp, host, kind, subject, object, attributes`` (attributes sorted).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .campaign import N_HOSTS, CampaignState

WINDOW_SECONDS = 300.0
EVENT_KINDS = ("process_create", "file_access", "socket_connect", "user_login", "registry_write",
               "alert")
ENTITY_TYPES = ("process", "file", "socket", "user", "host", "alert")

_BENIGN_KINDS = ("process_create", "file_access", "socket_connect", "user_login", "registry_write")
_BENIGN_KIND_P = np.array([0.25, 0.40, 0.25, 0.05, 0.05])
_BENIGN_PROCS = ("systemd", "sshd", "bash", "cron", "nginx", "python3", "postgres", "rsyslogd")
_BENIGN_FILES = ("/var/log/syslog", "/etc/passwd", "/etc/hosts", "/usr/lib/libc.so.6",
                 "/home/user/notes.txt", "/var/www/index.html", "/tmp/cache.db", "/etc/ssl/cert.pem")
_BENIGN_USERS = ("alice", "bob", "svc-backup")
_BENIGN_PORTS = (53, 80, 443, 5432)
_SCAN_PORTS = (22, 80, 443, 445, 3389, 8080)
_EXT_IPS = ("203.0.113.7", "203.0.113.9", "198.51.100.23")
FALSE_ALERT_SIGNATURE = "ET INFO Generic Protocol Anomaly"


@dataclass(frozen=True)
class Event:
    timestamp: float
    host: int
    kind: str
    subject: str
    object: str
    attributes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"timestamp": self.timestamp, "host": self.host, "kind": self.kind,
                           "subject": self.subject, "object": self.object,
                           "attributes": dict(sorted(self.attributes.items()))})

    @classmethod
    def from_json(cls, line: str) -> "Event":
        d = json.loads(line)
        return cls(float(d["timestamp"]), int(d["host"]), d["kind"], d["subject"], d["object"],
                   dict(d.get("attributes", {})))


@dataclass(frozen=True)
class NoiseProfile:
    benign_rate: float = 20.0
    # scales each stage's template rate; index 0 unused
    attack_multiplier: tuple[float, ...] = (0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    false_positive_rate: float = 0.01
    true_positive_rate: float = 0.6
    n_hosts: int = N_HOSTS

    def __post_init__(self):
        if self.benign_rate < 0 or min(self.attack_multiplier) < 0:
            raise ValueError("rates must be non-negative")
        for p in (self.false_positive_rate, self.true_positive_rate):
            if not 0.0 <= p <= 1.0:
                raise ValueError("alert rates must be probabilities")
        if len(self.attack_multiplier) != 7:
            raise ValueError("attack_multiplier needs 7 entries")


@dataclass(frozen=True)
class _Template:
    technique: str
    kind: str
    subject: str
    object: str
    extra: tuple


def _load_templates():
    raw = yaml.safe_load(resources.files("stagedefense.data").joinpath("templates.yaml").read_text())
    out = {}
    for stage, entry in raw.items():
        temps = []
        for e in entry["events"]:
            extra = tuple(sorted((k, str(v)) for k, v in e.items()
                                 if k not in ("technique", "kind", "subject", "object")))
            temps.append(_Template(e["technique"], e["kind"], e["subject"], e["object"], extra))
        out[int(stage)] = (float(entry["rate"]), entry["signature"], tuple(temps))
    return out


TEMPLATES = _load_templates()


def entity(etype: str, host: int, name: str) -> str:
    return f"{etype}:h{host}:{name}"


def _fill(pattern: str, host: int, u: np.ndarray) -> str:
    etype, name = pattern.split(":", 1)
    if "{" in name:
        name = name.format(
            int_ip=f"10.0.{int(u[0] * 4)}.{1 + int(u[1] * 30)}",
            ext_ip=_EXT_IPS[int(u[2] * len(_EXT_IPS))],
            port=_SCAN_PORTS[int(u[3] * len(_SCAN_PORTS))],
            pid=1000 + int(u[4] * 3),
            n=int(u[5] * 4))
    return entity(etype, host, name)


def _benign_event(h: int, ts: float, kind_idx: int, u: np.ndarray) -> Event:
    kind = _BENIGN_KINDS[kind_idx]
    np_ = len(_BENIGN_PROCS)
    proc = entity("process", h, f"{_BENIGN_PROCS[int(u[0] * np_)]}#{100 + int(u[1] * 3)}")
    if kind == "process_create":
        j = (int(u[0] * np_) + 1 + int(u[2] * (np_ - 1))) % np_
        obj = entity("process", h, f"{_BENIGN_PROCS[j]}#{100 + int(u[3] * 3)}")
        return Event(ts, h, kind, proc, obj, {})
    if kind == "file_access":
        obj = entity("file", h, _BENIGN_FILES[int(u[2] * len(_BENIGN_FILES))])
        return Event(ts, h, kind, proc, obj, {"mode": "write" if u[3] < 0.2 else "read"})
    if kind == "socket_connect":
        ip = f"10.0.0.{1 + int(u[2] * N_HOSTS)}"
        obj = entity("socket", h, f"{ip}:{_BENIGN_PORTS[int(u[3] * len(_BENIGN_PORTS))]}")
        return Event(ts, h, kind, proc, obj, {})
    if kind == "user_login":
        user = entity("user", h, _BENIGN_USERS[int(u[2] * len(_BENIGN_USERS))])
        return Event(ts, h, kind, user, entity("process", h, f"sshd#{100 + int(u[3] * 3)}"), {})
    return Event(ts, h, kind, proc, entity("file", h, "/var/lib/dpkg/status"), {})


def _alert(h: int, ts: float, t_end: float, signature: str, idx: int) -> Event:
    slug = signature.replace(" ", "_")
    return Event(min(ts + 1.0, t_end), h, "alert", entity("alert", h, f"{slug}#{idx}"),
                 entity("host", h, "host"), {"signature": signature})


def emit_window(campaign: CampaignState, profile: NoiseProfile, fidelity: float,
                window_index: int, rng: np.random.Generator) -> list[Event]:
    """Events observed during one window, sorted by timestamp."""
    if not 0.0 <= fidelity <= 1.0:
        raise ValueError(f"fidelity {fidelity} outside [0, 1]")
    t0 = window_index * WINDOW_SECONDS
    t_end = t0 + WINDOW_SECONDS - 1e-3
    events: list[Event] = []
    alerts: list[Event] = []

    counts = rng.poisson(profile.benign_rate, size=profile.n_hosts)
    n_benign = int(counts.sum())
    if n_benign:
        hosts = np.repeat(np.arange(profile.n_hosts), counts)
        ts = t0 + rng.random(n_benign) * (WINDOW_SECONDS - 2.0)
        kinds = np.searchsorted(np.cumsum(_BENIGN_KIND_P), rng.random(n_benign), side="right")
        kinds = np.minimum(kinds, len(_BENIGN_KINDS) - 1)
        u = rng.random((n_benign, 4))
        fp = rng.random(n_benign) < profile.false_positive_rate
        for i in range(n_benign):
            ev = _benign_event(int(hosts[i]), float(ts[i]), int(kinds[i]), u[i])
            events.append(ev)
            if fp[i]:
                alerts.append(_alert(ev.host, ev.timestamp, t_end, FALSE_ALERT_SIGNATURE, len(alerts)))

    k = campaign.k_true
    if k >= 1 and campaign.compromised:
        base_rate, signature, temps = TEMPLATES[k]
        rate = base_rate * profile.attack_multiplier[k]
        p_detect = profile.true_positive_rate * (0.5 + 0.5 * fidelity)
        step = campaign.step
        for h in sorted(campaign.compromised):
            n = int(rng.poisson(rate))
            if n == 0:
                continue
            weights = np.array([2.0 if (step is not None and h == step.host
                                        and t.technique == step.technique) else 1.0
                                for t in temps])
            cum = np.cumsum(weights / weights.sum())
            choice = np.minimum(np.searchsorted(cum, rng.random(n), side="right"), len(temps) - 1)
            ts = t0 + rng.random(n) * (WINDOW_SECONDS - 2.0)
            u = rng.random((n, 6))
            detected = rng.random(n) < p_detect
            for i in range(n):
                t = temps[int(choice[i])]
                attrs = {"technique": t.technique, **dict(t.extra)}
                ev = Event(float(ts[i]), h, t.kind, _fill(t.subject, h, u[i]), _fill(t.object, h, u[i]),
                           attrs)
                events.append(ev)
                if detected[i]:
                    alerts.append(_alert(h, ev.timestamp, t_end, signature, len(alerts)))

    events.extend(alerts)
    events.sort(key=lambda e: (e.timestamp, e.host, e.kind, e.subject, e.object))
    return events


def write_events(path, events) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


def read_events(path) -> list[Event]:
    with open(path) as fh:
        return [Event.from_json(line) for line in fh if line.strip()]

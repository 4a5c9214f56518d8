"""
Caller authentication and per-operation authorization.

Certificate chains are validated upstream (TLS terminator); this module only
sees the subject DN and organization attributes. A caller is accepted when an
attribute certifies membership of the organization or when the subject is a
listed member. Privileged subjects get every operation; ordinary members read
and list everywhere and write/delete under the scratch prefix.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import FrozenSet, Iterable, Optional, Tuple

from server.config import path_within

logger = logging.getLogger(__name__)


class AuthError(Exception):
    status_code = 403


class Unauthenticated(AuthError):
    """No credential was presented"""
    status_code = 401


class Forbidden(AuthError):
    """The credential is valid but grants no access"""
    status_code = 403


class OperationClass(str, Enum):
    READ = 'read'
    WRITE = 'write'
    LIST = 'list'
    DELETE = 'delete'


METHOD_OPERATIONS = {
    'GET': OperationClass.READ,
    'HEAD': OperationClass.READ,
    'PUT': OperationClass.WRITE,
    'PROPFIND': OperationClass.LIST,
    'DELETE': OperationClass.DELETE,
}


def operation_for_method(method: str) -> OperationClass:
    try:
        return METHOD_OPERATIONS[method.upper()]
    except KeyError:
        raise ValueError(f"Method {method} maps to no operation class")


@dataclass(frozen=True)
class ClientIdentity:
    subject: str
    attributes: Tuple[str, ...] = ()
    privileged: bool = False

    def __post_init__(self):
        if not self.subject:
            raise ValueError("An authenticated identity needs a subject")


def _read_dn_file(path: Optional[str]) -> FrozenSet[str]:
    """One DN per line, '#' comments"""
    if not path:
        return frozenset()
    with open(path, encoding='utf-8') as f:
        return frozenset(
            line.strip() for line in f
            if line.strip() and not line.lstrip().startswith('#')
        )


@dataclass(frozen=True)
class MembershipRegistry:
    members: FrozenSet[str] = frozenset()
    privileged: FrozenSet[str] = frozenset()
    required_attribute_prefix: str = '/atlas'

    @classmethod
    def load(cls, members_path: Optional[str], privileged_path: Optional[str],
             required_attribute_prefix: str = '/atlas') -> 'MembershipRegistry':
        registry = cls(
            members=_read_dn_file(members_path),
            privileged=_read_dn_file(privileged_path),
            required_attribute_prefix=required_attribute_prefix,
        )
        logger.info(f"Loaded {len(registry.members)} members and "
                    f"{len(registry.privileged)} privileged accounts")
        return registry

    def certifies(self, attribute: str) -> bool:
        prefix = self.required_attribute_prefix
        return attribute == prefix or attribute.startswith(prefix.rstrip('/') + '/')


def authenticate(subject: Optional[str], attributes: Iterable[str],
                 registry: MembershipRegistry) -> ClientIdentity:
    """Accept a transport identity via organization attribute or member list"""
    if not subject or not subject.strip():
        raise Unauthenticated("No client credential presented")
    subject = subject.strip()
    attributes = tuple(a.strip() for a in attributes if a and a.strip())
    privileged = subject in registry.privileged
    accepted = (
        privileged
        or any(registry.certifies(a) for a in attributes)
        or subject in registry.members
    )
    if not accepted:
        raise Forbidden(f"{subject} is not a member of the federation")
    return ClientIdentity(subject=subject, attributes=attributes, privileged=privileged)


def authorize(identity: ClientIdentity, op: OperationClass, path: str, scratch_prefix: str) -> bool:
    """Deny-by-default grant table"""
    if identity.privileged:
        return True
    if op in (OperationClass.READ, OperationClass.LIST):
        return True
    if op in (OperationClass.WRITE, OperationClass.DELETE):
        return path_within(path, scratch_prefix)
    return False

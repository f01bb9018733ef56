"""Exception types shared across the package."""


class SkillSafeError(Exception):
    """Base class for every package specific error."""


class DomainError(SkillSafeError):
    """Non-finite or otherwise out-of-domain numerical input."""


class SingularityError(DomainError):
    """Path-coordinate denominator 1 - d*kappa(p) fell below the guard."""


class MissingNeighborError(SkillSafeError):
    """A barrier was evaluated against a neighbor absent from the observation."""


class DegreeError(SkillSafeError):
    """Barrier relative degree does not match the dynamics/spec combination."""


class NumericalError(SkillSafeError):
    """Ill-conditioned or numerically unreliable linear algebra."""


class SingularKKTError(NumericalError):
    """The reduced KKT system of an optimal QP solution is singular."""


class EmptyMaskError(SkillSafeError):
    """Skill sampling was requested with every catalog entry masked out."""


class ConfigError(SkillSafeError):
    """Semantically invalid configuration value."""


class ParseError(ConfigError):
    """Malformed or unknown keys in a configuration document."""


class StaleBatchError(SkillSafeError):
    """An update was attempted with data collected under older parameters."""


class PartitionError(SkillSafeError):
    """Agent grouping is not a disjoint cover of the agent set."""


class SpawnError(SkillSafeError):
    """No non-overlapping spawn placement found within the attempt budget."""


class DeadAgentError(SkillSafeError):
    """Operation requested for an agent that is no longer alive."""


class ZeroSuccessError(SkillSafeError):
    """Success-weighted metrics are undefined because no agent succeeded."""

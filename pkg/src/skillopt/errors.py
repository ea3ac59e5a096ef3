"""Exception types raised across the package."""

from __future__ import annotations


class SkillOptError(Exception):
    """Base class for every error raised by skillopt."""


# package parsing / shape
class PackageError(SkillOptError):
    pass


class MissingSkillMd(PackageError):
    pass


class MalformedFrontmatter(PackageError):
    pass


class DuplicateHeading(PackageError):
    pass


class UnrecognizedTopLevelEntry(PackageError):
    pass


class BadPackagePath(PackageError):
    pass


class MalformedFile(PackageError):
    pass


class StructureMismatch(PackageError):
    pass


class IncompatibleContent(PackageError):
    pass


# structure edits
class EditError(SkillOptError):
    pass


class InadmissibleAction(EditError):
    pass


class BadParams(EditError):
    pass


class ActionSyntaxError(EditError):
    pass


# outer search
class DomainError(SkillOptError, ValueError):
    pass


class EmptyTree(SkillOptError):
    pass


class UnknownNode(SkillOptError, KeyError):
    pass


class SeedInvalid(SkillOptError):
    pass


# inner loop
class BridgeFailure(SkillOptError):
    pass


class EmptyDeltas(SkillOptError, ValueError):
    pass


class AllVariantsInvalid(SkillOptError):
    pass


class NoValidAttempts(SkillOptError):
    pass


class FamilyViolation(SkillOptError):
    pass


# advisor
class AdvisorFailure(SkillOptError):
    pass


class OutOfCatalog(SkillOptError):
    def __init__(self, message: str, kinds: tuple[str, ...] = ()):
        super().__init__(message)
        self.kinds = kinds


# evaluation
class EvaluatorFailure(SkillOptError):
    pass


class RunnerFailure(EvaluatorFailure):
    pass


class InsufficientData(SkillOptError, ValueError):
    pass


class EmptyInstanceSet(SkillOptError, ValueError):
    pass


class IdMismatch(SkillOptError, ValueError):
    pass


class ConfigError(SkillOptError):
    pass

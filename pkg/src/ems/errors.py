"""Exception hierarchy.

Every domain error derives from :class:`EMSError`; the CLI maps these to exit
code 1 and prints ``<ClassName>: <message>``.
"""


class EMSError(Exception):
    """Base class for all domain errors."""

    @property
    def kind(self) -> str:
        return type(self).__name__


# packaging
class InvalidPath(EMSError):
    pass


class InvalidJobCount(EMSError):
    pass


class IoFailure(EMSError):
    pass


class UnknownPackage(EMSError):
    pass


# scriptgrid
class NoParallelLoop(EMSError):
    pass


class MalformedLoop(EMSError):
    pass


class UnsupportedRange(EMSError):
    pass


class EmptyGrid(EMSError):
    pass


class NoInterpreter(EMSError):
    pass


# backends
class InvalidResource(EMSError):
    pass


class AdmissionRefused(EMSError):
    def __init__(self, reasons):
        self.reasons = tuple(reasons)
        super().__init__("request exceeds limits: " + ", ".join(self.reasons))


class BackendUnavailable(EMSError):
    pass


class UnknownJob(EMSError):
    pass


class InvalidTransition(EMSError):
    pass


class UnknownProfile(EMSError):
    pass


# provision
class DuplicateCluster(EMSError):
    pass


class UnknownCluster(EMSError):
    pass


# bundlegraph
class UnknownBundle(EMSError):
    pass


class UnknownDependency(EMSError):
    pass


class DependencyNotReady(EMSError):
    pass


class DanglingReference(EMSError):
    pass


class EmptyUpload(EMSError):
    pass


class CycleDetected(EMSError):
    pass


# harvest
class NoSuchResultFile(EMSError):
    pass


class NotLineOriented(EMSError):
    pass


# cli
class MalformedAssignment(EMSError):
    pass

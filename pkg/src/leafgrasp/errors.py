"""Exception hierarchy shared across the package."""


class LeafGraspError(Exception):
    """Base class for all package errors."""


# geometry
class NonOrthonormalBasis(LeafGraspError, ValueError):
    pass


class ZeroAxis(LeafGraspError, ValueError):
    pass


# perception
class DimensionMismatch(LeafGraspError, ValueError):
    pass


class EmptyCloud(LeafGraspError):
    pass


class DegenerateCloud(LeafGraspError):
    pass


class DegenerateTangent(LeafGraspError):
    pass


# scenegen
class InvalidParams(LeafGraspError, ValueError):
    pass


class EmptyRender(LeafGraspError):
    pass


# kinematics
class LengthMismatch(LeafGraspError, ValueError):
    pass


class NoSolution(LeafGraspError):
    pass


# planning
class PlanningFailure(LeafGraspError):
    """Raised when no collision-free path could be produced."""

    reason = "planning_failed"


class StartInCollision(PlanningFailure):
    reason = "start_in_collision"


class GoalInCollision(PlanningFailure):
    reason = "goal_in_collision"


class PlanningTimeout(PlanningFailure):
    reason = "timeout"


# workflow
class DegenerateReference(LeafGraspError, ValueError):
    pass


class EmptyInput(LeafGraspError, ValueError):
    pass


# io / cli
class MalformedInput(LeafGraspError, ValueError):
    pass


class ConfigError(LeafGraspError):
    pass

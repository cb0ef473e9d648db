from .engine import (
    ResetSchedule,
    apply_action_kinematics,
    clamp_action_command,
    control_step,
    generate_reset_pose,
    init_state,
    loss_timesteps,
    reset_tool,
    rollout,
    rollout_loss_and_grad,
    sample_tool_surface,
    substep_probe,
    tool_signed_distance,
)
from .types import (
    ActionCommand,
    ParticleState,
    SimState,
    ToolPose,
    actions_to_array,
    array_to_actions,
    make_tool_pose,
)

__all__ = [
    "ActionCommand",
    "ParticleState",
    "ResetSchedule",
    "SimState",
    "ToolPose",
    "actions_to_array",
    "apply_action_kinematics",
    "array_to_actions",
    "clamp_action_command",
    "control_step",
    "generate_reset_pose",
    "init_state",
    "loss_timesteps",
    "make_tool_pose",
    "reset_tool",
    "rollout",
    "rollout_loss_and_grad",
    "sample_tool_surface",
    "substep_probe",
    "tool_signed_distance",
]

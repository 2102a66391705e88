"""Trajectory auto-complete for shared-autonomy teleoperation.

A masked transformer forecasts future end-effector states and actions from a
partial trajectory; a kinematic desk-scale simulator executes them closed-loop;
a human operator can take over at any time to nudge the model back on track.
"""

__version__ = "0.1.0"

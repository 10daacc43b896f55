"""Visual action primitives as the interface between a planner and a flow-matching action expert.

A toy tabletop simulator produces two-stage pick-and-place demonstrations.
``supervision`` turns gripper events into image-plane primitive labels,
``render`` draws those primitives onto camera frames, ``learn`` trains the
primitive decoder and action expert jointly, and ``harness`` runs the
experiments behind the ``avp`` command.
"""

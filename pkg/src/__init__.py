"""
Desk-scale multi-branch driving planner.

Main components:
    - world.py      : Scenario data model, file I/O, geometry and scene tokens
    - kinematics.py : Bicycle model, rollout, resampling and the PID tracker
    - teachers.py   : Rule-based collision / lane-keeping / progress labels
    - nn.py         : Parameters, cross-attention, AdamW, gradient check, checkpoints
    - heads.py      : Trajectory-vocabulary and discrete-control decoders
    - diffusion.py  : DDPM / DDIM control-sequence proposals
    - refine.py     : Nearest-neighbour candidate matching and ensembling
    - simloop.py    : Closed-loop micro-simulator, expert, episode logs and metrics
    - scenarios.py  : Bundled evaluation suite
    - training.py   : Demo datasets, training and open-loop evaluation
    - render.py     : Episode drawings and animations
    - config.py     : RunConfig (TOML)
    - cli.py        : ``deskplan`` command line
"""

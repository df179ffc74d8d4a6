"""Deterministic table-top pick-and-place world.

Kinematic, not dynamic: the gripper moves by clipped per-step deltas
inside the unit cube, closing near an object attaches it, the attached
object tracks the gripper exactly, opening releases it in place. Scenes,
templated instructions, rendering, and the scripted expert are all pure
functions of a seed.

Coordinates are workspace units in [0, 1]; the table plane is z = 0 and
the top-down renderer maps (x, y) onto a square raster.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace

import numpy as np

COLORS = {
    "red": (230, 40, 40),
    "green": (40, 220, 50),
    "blue": (50, 90, 240),
    "yellow": (240, 230, 40),
}
SHAPES = ("block", "ball")
BACKGROUND = (0, 0, 0)

A_MAX = 0.05        # per-step position delta bound (inf-norm)
R_GRASP = 0.08      # close within this 3-D distance of a center to attach
R_GOAL = 0.10       # success: target center within this distance of goal
Z_HOVER = 0.25      # travel height of the scripted expert
Z_RELEASE = 0.04    # release height above the goal (< R_GOAL)
MARGIN = 0.12       # keep spawn positions this far from the x/y walls
EXPERT_CAP = 120    # hard bound on scripted-expert trajectory length

INSTRUCTION_TEMPLATES = (
    "place the {color} {shape} in the {goal} bowl",
    "put the {color} {shape} into the {goal} bowl",
    "move the {color} {shape} to the {goal} bowl",
)


@dataclass
class Obj:
    oid: int
    shape: str
    color: str
    pos: np.ndarray  # (3,)
    radius: float


@dataclass
class Gripper:
    pos: np.ndarray  # (3,)
    closed: bool = False
    attached: int | None = None  # object id


@dataclass
class Scene:
    gripper: Gripper
    objects: list
    goal_color: str
    goal_pos: np.ndarray  # (3,), z = 0
    goal_radius: float
    target_id: int = 0
    template_idx: int = 0

    def target(self):
        return next(o for o in self.objects if o.oid == self.target_id)

    def copy(self):
        return Scene(
            gripper=Gripper(self.gripper.pos.copy(), self.gripper.closed, self.gripper.attached),
            objects=[replace(o, pos=o.pos.copy()) for o in self.objects],
            goal_color=self.goal_color,
            goal_pos=self.goal_pos.copy(),
            goal_radius=self.goal_radius,
            target_id=self.target_id,
            template_idx=self.template_idx,
        )

    def state(self):
        """Proprioceptive state s: gripper xyz + aperture (1 open, 0 closed)."""
        return np.append(self.gripper.pos, 0.0 if self.gripper.closed else 1.0)


class PlacementError(RuntimeError):
    """Could not place scene entities without overlap."""


def generate_scene(seed, n_distractors=2):
    """Seed-deterministic scene: one target, one goal bowl, n distractors.

    Object colors are unique within a scene (a stronger guarantee than
    unique color/shape pairs, and what keeps referring expressions
    unambiguous); entities are rejection-sampled so that all pairwise
    distances exceed the sum of radii and nothing starts inside the goal.
    """
    if n_distractors < 0:
        raise ValueError("n_distractors must be >= 0")
    if n_distractors + 1 > len(COLORS):
        raise PlacementError("not enough distinct object colors")
    rng = np.random.default_rng(np.random.SeedSequence([7, int(seed)]))

    colors = [list(COLORS)[i] for i in rng.choice(len(COLORS), size=n_distractors + 1, replace=False)]
    shapes = [SHAPES[i] for i in rng.integers(len(SHAPES), size=n_distractors + 1)]
    goal_color = list(COLORS)[rng.integers(len(COLORS))]

    def sample_xy():
        return rng.uniform(MARGIN, 1.0 - MARGIN, size=2)

    goal_pos = np.array([*sample_xy(), 0.0])
    goal_radius = R_GOAL
    objects = []
    for oid, (color, shape) in enumerate(zip(colors, shapes)):
        radius = float(rng.uniform(0.07, 0.09))
        for attempt in range(200):
            pos = np.array([*sample_xy(), 0.0])
            if np.linalg.norm(pos[:2] - goal_pos[:2]) < goal_radius + radius + 0.03:
                continue
            if all(np.linalg.norm(pos[:2] - o.pos[:2]) >= radius + o.radius + 0.02
                   for o in objects):
                break
        else:
            raise PlacementError(f"no valid placement after 200 tries (seed {seed})")
        objects.append(Obj(oid, shape, color, pos, radius))

    grip = np.array([*sample_xy(), rng.uniform(0.20, 0.35)])
    return Scene(
        gripper=Gripper(grip),
        objects=objects,
        goal_color=goal_color,
        goal_pos=goal_pos,
        goal_radius=goal_radius,
        target_id=0,
        template_idx=int(rng.integers(len(INSTRUCTION_TEMPLATES))),
    )


def make_instruction(scene: Scene):
    t = scene.target()
    return INSTRUCTION_TEMPLATES[scene.template_idx].format(
        color=t.color, shape=t.shape, goal=scene.goal_color)


def parse_instruction(text):
    """Inverse of make_instruction: -> (target color, target shape, goal color).

    Raises ValueError when the text matches no template.
    """
    words = text.lower().split()
    for color in COLORS:
        for shape in SHAPES:
            for goal in COLORS:
                for tpl in INSTRUCTION_TEMPLATES:
                    if tpl.format(color=color, shape=shape, goal=goal).split() == words:
                        return color, shape, goal
    raise ValueError(f"unparseable instruction: {text!r}")


def step(scene: Scene, action):
    """Apply one action in place: [dx, dy, dz, grip]; grip < 0 closes.

    Position deltas are clipped to +-A_MAX and the gripper to the unit
    cube. Closing while within R_GRASP of an unattached object's center
    attaches the nearest one; opening releases in place.
    """
    action = np.asarray(action, dtype=np.float64)
    g = scene.gripper
    dp = np.clip(action[:3], -A_MAX, A_MAX)
    g.pos = np.clip(g.pos + dp, 0.0, 1.0)

    if action[3] < 0.0:
        g.closed = True
        if g.attached is None:
            near = [(float(np.linalg.norm(o.pos - g.pos)), o.oid) for o in scene.objects]
            dist, oid = min(near)
            if dist <= R_GRASP:
                g.attached = oid
    else:
        g.closed = False
        g.attached = None

    if g.attached is not None:
        for o in scene.objects:
            if o.oid == g.attached:
                o.pos = g.pos.copy()
    return scene


def check_success(scene: Scene):
    """Target center within goal radius, released, and gripper open."""
    t = scene.target()
    dist = float(np.linalg.norm(t.pos - scene.goal_pos))
    return dist <= scene.goal_radius and not scene.gripper.closed and scene.gripper.attached is None


def render(scene: Scene, resolution=64):
    """Top-down orthographic raster, uint8 (H, W, 3). Deterministic.

    Goal bowl is a ring, balls are discs, blocks are squares, the gripper
    is a white cross whose arm length reflects its aperture.
    """
    img = np.empty((resolution, resolution, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    xs = (np.arange(resolution) + 0.5) / resolution
    gx, gy = np.meshgrid(xs, xs)  # gy indexes rows (y), gx columns (x)

    r = scene.goal_radius
    d2 = (gx - scene.goal_pos[0]) ** 2 + (gy - scene.goal_pos[1]) ** 2
    ring = (d2 <= (1.2 * r) ** 2) & (d2 >= (0.55 * r) ** 2)
    img[ring] = COLORS[scene.goal_color]

    for o in scene.objects:
        if o.shape == "ball":
            mask = (gx - o.pos[0]) ** 2 + (gy - o.pos[1]) ** 2 <= o.radius ** 2
        else:
            mask = (np.abs(gx - o.pos[0]) <= o.radius) & (np.abs(gy - o.pos[1]) <= o.radius)
        img[mask] = COLORS[o.color]

    cx = int(np.clip(scene.gripper.pos[0] * resolution, 0, resolution - 1))
    cy = int(np.clip(scene.gripper.pos[1] * resolution, 0, resolution - 1))
    arm = max(2, resolution // 16) if not scene.gripper.closed else max(1, resolution // 32)
    img[max(0, cy - arm): cy + arm + 1, cx] = 255
    img[cy, max(0, cx - arm): cx + arm + 1] = 255
    return img


def observation_image(scene: Scene, resolution=64):
    """(C, H, W) floats in [0, 1], the model-facing view."""
    return render(scene, resolution).transpose(2, 0, 1).astype(np.float32) / 255.0


_XY_TOL = 0.02      # "above" tolerance before committing to a descend


def _toward(pos, waypoint, grip):
    dp = np.clip(np.asarray(waypoint) - pos, -A_MAX, A_MAX)
    return np.append(dp, grip)


def expert_action(scene: Scene):
    """Next expert action from the current scene state.

    Waypoint phases: move above the target, descend, close, lift, move
    above the goal, descend, open. Being state feedback (recomputed every
    step), the expert self-corrects after perturbations.
    """
    t = scene.target()
    g = scene.gripper
    p = g.pos
    if g.attached == t.oid:
        above_goal = np.max(np.abs(p[:2] - scene.goal_pos[:2])) <= _XY_TOL
        if not above_goal and p[2] < Z_HOVER - 1e-9:
            return _toward(p, [p[0], p[1], Z_HOVER], -1.0)          # lift
        if not above_goal:
            return _toward(p, [*scene.goal_pos[:2], Z_HOVER], -1.0)  # carry
        if p[2] > Z_RELEASE + 1e-9:
            return _toward(p, [*scene.goal_pos[:2], Z_RELEASE], -1.0)
        return np.array([0.0, 0.0, 0.0, 1.0])                        # release
    if g.attached is not None:
        return np.array([0.0, 0.0, 0.0, 1.0])                        # drop wrong object
    if np.linalg.norm(p - t.pos) <= 0.5 * R_GRASP:
        return np.array([0.0, 0.0, 0.0, -1.0])                       # close
    if np.max(np.abs(p[:2] - t.pos[:2])) > _XY_TOL:
        return _toward(p, [*t.pos[:2], Z_HOVER], 1.0)                # approach
    return _toward(p, [*t.pos[:2], 0.0], 1.0)                        # descend


def scripted_expert(scene: Scene):
    """Full expert action sequence from the given scene, (T, 4).

    Simulates expert_action on a copy until success; raises if the scene
    cannot be solved within the step cap.
    """
    world = scene.copy()
    actions = []
    for _ in range(EXPERT_CAP):
        a = expert_action(world)
        actions.append(a)
        step(world, a)
        if check_success(world):
            return np.array(actions)
    raise RuntimeError(f"expert did not solve the scene within {EXPERT_CAP} steps")


@dataclass
class Episode:
    instruction: str
    images: np.ndarray   # (T, H, W, 3) uint8
    states: np.ndarray   # (T, 4) float32
    actions: np.ndarray  # (T, 4) float32
    seed: int
    success: bool

    def __len__(self):
        return len(self.actions)


def run_episode(seed, n_distractors=2, resolution=64, noise_scale=0.0):
    """Roll the expert through the world, recording every frame.

    With noise_scale > 0, zero-mean uniform noise perturbs the position
    deltas during the open-gripper travel phases. The recorded action is
    the executed (noisy) one, so stored episodes replay exactly, and the
    state-feedback expert corrects the drift on the next step.
    """
    scene = generate_scene(seed, n_distractors)
    instruction = make_instruction(scene)
    rng = np.random.default_rng(np.random.SeedSequence([11, int(seed)]))

    images, states, actions = [], [], []
    world = scene.copy()
    for _ in range(EXPERT_CAP):
        a = expert_action(world)
        if noise_scale > 0.0 and a[3] > 0 and not world.gripper.closed:
            a = a.copy()
            a[:3] = np.clip(a[:3] + rng.uniform(-noise_scale, noise_scale, 3), -A_MAX, A_MAX)
        images.append(render(world, resolution))
        states.append(world.state())
        actions.append(a)
        step(world, a)
        if check_success(world):
            break

    return Episode(
        instruction=instruction,
        images=np.array(images, dtype=np.uint8),
        states=np.array(states, dtype=np.float32),
        actions=np.array(actions, dtype=np.float32),
        seed=int(seed),
        success=check_success(world),
    )


def replay(episode: Episode, n_distractors=2):
    """Re-execute a stored action sequence from the episode's seed."""
    world = generate_scene(episode.seed, n_distractors)
    for a in episode.actions:
        step(world, a)
        if check_success(world):
            return True
    return check_success(world)


def generate_dataset(n_episodes, seed, n_distractors=2, resolution=64, noise_scale=0.0):
    """n seed-derived episodes, split 80/20 into train/validation by index."""
    if n_episodes < 2:
        raise ValueError("need at least 2 episodes to split")
    base = np.random.SeedSequence(int(seed)).generate_state(n_episodes, dtype=np.uint64)
    episodes = [
        run_episode(int(s), n_distractors, resolution, noise_scale) for s in base
    ]
    n_train = int(round(n_episodes * 0.8))
    return episodes[:n_train], episodes[n_train:]


def write_episodes(episodes, path):
    """One JSON record per line; image bytes are base64 of the flat
    row-major RGB uint8 buffer, states/actions are decimal reals."""
    with open(path, "w") as f:
        for ep in episodes:
            t, h, w, _ = ep.images.shape
            rec = {
                "instruction": ep.instruction,
                "seed": ep.seed,
                "success": bool(ep.success),
                "width": w,
                "height": h,
                "frames": [
                    {
                        "image": base64.b64encode(ep.images[i].tobytes()).decode("ascii"),
                        "state": [float(v) for v in ep.states[i]],
                        "action": [float(v) for v in ep.actions[i]],
                    }
                    for i in range(t)
                ],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_episodes(path):
    episodes = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            h, w = rec["height"], rec["width"]
            images = np.stack([
                np.frombuffer(base64.b64decode(fr["image"]), dtype=np.uint8).reshape(h, w, 3)
                for fr in rec["frames"]
            ])
            episodes.append(Episode(
                instruction=rec["instruction"],
                images=images,
                states=np.array([fr["state"] for fr in rec["frames"]], dtype=np.float32),
                actions=np.array([fr["action"] for fr in rec["frames"]], dtype=np.float32),
                seed=rec["seed"],
                success=rec["success"],
            ))
    return episodes

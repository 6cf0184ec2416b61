//! 6x6 DoorKey grid: pick up the key, unlock the door in the dividing wall,
//! reach the goal in the bottom-right corner. Sparse +1 on reaching the goal.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_step, EnvEvent, EnvSpec, Environment, StepOutcome};
use crate::error::Result;
use crate::types::{state_key, Observation};

pub const SIZE: i32 = 6;
pub const DEFAULT_MAX_STEPS: usize = 120;

pub const TURN_LEFT: usize = 0;
pub const TURN_RIGHT: usize = 1;
pub const FORWARD: usize = 2;
pub const PICKUP: usize = 3;
pub const TOGGLE: usize = 4;

pub const ACTIONS: [&str; 5] = ["turn-left", "turn-right", "forward", "pickup", "toggle"];

pub const DOORKEY_FEATURES: [&str; 18] = [
    "key_held",
    "door_open",
    "dist_key",
    "dist_door",
    "dist_goal",
    "agent_x",
    "agent_y",
    "facing_east",
    "facing_south",
    "facing_west",
    "facing_north",
    "front_key",
    "front_door",
    "front_wall",
    "front_goal",
    "front_free",
    "target_dx",
    "target_dy",
];

/// Direction index: 0 east, 1 south, 2 west, 3 north.
const DIRS: [(i32, i32); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    fn ahead(self, dir: u8) -> Pos {
        let (dx, dy) = DIRS[dir as usize];
        Pos::new(self.x + dx, self.y + dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DoorKeyState {
    /// Column of the dividing wall.
    pub wall_x: i32,
    pub door: Pos,
    pub door_open: bool,
    /// `None` once the key is held.
    pub key: Option<Pos>,
    pub agent: Pos,
    pub dir: u8,
    pub goal: Pos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Wall,
    Floor,
    Key,
    DoorClosed,
    DoorOpen,
    Goal,
}

impl DoorKeyState {
    pub fn key_held(&self) -> bool {
        self.key.is_none()
    }

    fn cell(&self, p: Pos) -> Cell {
        if p.x <= 0 || p.y <= 0 || p.x >= SIZE - 1 || p.y >= SIZE - 1 {
            return Cell::Wall;
        }
        if p.x == self.wall_x {
            if p == self.door {
                return if self.door_open {
                    Cell::DoorOpen
                } else {
                    Cell::DoorClosed
                };
            }
            return Cell::Wall;
        }
        if Some(p) == self.key {
            return Cell::Key;
        }
        if p == self.goal {
            return Cell::Goal;
        }
        Cell::Floor
    }

    fn walkable(&self, p: Pos, door_passable: bool) -> bool {
        match self.cell(p) {
            Cell::Floor | Cell::Goal | Cell::DoorOpen => true,
            Cell::DoorClosed => door_passable,
            Cell::Wall | Cell::Key => false,
        }
    }

    /// Shortest walking distance from the agent to `target`, where the target
    /// cell itself counts as reachable even when it blocks movement.
    fn distance_to(&self, target: Pos, door_passable: bool) -> f64 {
        if self.agent == target {
            return 0.0;
        }
        let mut dist = [[u32::MAX; SIZE as usize]; SIZE as usize];
        let mut queue = VecDeque::new();
        dist[target.y as usize][target.x as usize] = 0;
        queue.push_back(target);
        while let Some(p) = queue.pop_front() {
            let d = dist[p.y as usize][p.x as usize];
            for dir in 0..4u8 {
                let n = p.ahead(dir);
                if n.x < 0 || n.y < 0 || n.x >= SIZE || n.y >= SIZE {
                    continue;
                }
                if dist[n.y as usize][n.x as usize] != u32::MAX {
                    continue;
                }
                if n != self.agent && !self.walkable(n, door_passable) {
                    continue;
                }
                dist[n.y as usize][n.x as usize] = d + 1;
                if n == self.agent {
                    return (d + 1) as f64;
                }
                queue.push_back(n);
            }
        }
        // unreachable cannot happen on valid layouts; keep it finite
        (2 * SIZE * SIZE) as f64
    }

    fn canonical(&self) -> String {
        let key = match self.key {
            Some(k) => format!("{},{}", k.x, k.y),
            None => "held".to_string(),
        };
        format!(
            "doorkey|wall={}|door={},{}:{}|key={}|agent={},{}:{}",
            self.wall_x,
            self.door.x,
            self.door.y,
            if self.door_open { "open" } else { "closed" },
            key,
            self.agent.x,
            self.agent.y,
            self.dir
        )
    }

    pub fn at_goal(&self) -> bool {
        self.agent == self.goal
    }

    /// Every layout and agent pose with the key on the floor, door closed.
    pub fn enumerate_initial() -> Vec<DoorKeyState> {
        let mut out = Vec::new();
        for wall_x in 2..=3 {
            for door_y in 1..SIZE - 1 {
                for kx in 1..wall_x {
                    for ky in 1..SIZE - 1 {
                        for ax in 1..wall_x {
                            for ay in 1..SIZE - 1 {
                                if (ax, ay) == (kx, ky) {
                                    continue;
                                }
                                for dir in 0..4 {
                                    out.push(DoorKeyState {
                                        wall_x,
                                        door: Pos::new(wall_x, door_y),
                                        door_open: false,
                                        key: Some(Pos::new(kx, ky)),
                                        agent: Pos::new(ax, ay),
                                        dir,
                                        goal: Pos::new(SIZE - 2, SIZE - 2),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Applies one action, returning the event it caused.
    fn apply(&mut self, action: usize) -> Option<EnvEvent> {
        match action {
            TURN_LEFT => {
                self.dir = (self.dir + 3) % 4;
                None
            }
            TURN_RIGHT => {
                self.dir = (self.dir + 1) % 4;
                None
            }
            FORWARD => {
                let front = self.agent.ahead(self.dir);
                if self.walkable(front, false) {
                    self.agent = front;
                    if self.at_goal() {
                        return Some(EnvEvent::Goal);
                    }
                }
                None
            }
            PICKUP => {
                let front = self.agent.ahead(self.dir);
                if self.key == Some(front) {
                    self.key = None;
                    return Some(EnvEvent::KeyPickup);
                }
                None
            }
            TOGGLE => {
                let front = self.agent.ahead(self.dir);
                if front == self.door && !self.door_open && self.key_held() {
                    self.door_open = true;
                    return Some(EnvEvent::DoorOpen);
                }
                None
            }
            _ => None,
        }
    }

    /// Successor states reachable in one action (used by planners and tests).
    pub fn successor(&self, action: usize) -> (DoorKeyState, Option<EnvEvent>) {
        let mut next = *self;
        let ev = next.apply(action);
        (next, ev)
    }

    fn features(&self) -> Vec<f64> {
        let dist_key = match self.key {
            Some(k) => self.distance_to(k, false),
            None => 0.0,
        };
        let dist_door = self.distance_to(self.door, false);
        let dist_goal = self.distance_to(self.goal, true);
        let front = self.cell(self.agent.ahead(self.dir));
        let target = match (self.key, self.door_open) {
            (Some(k), _) => k,
            (None, false) => self.door,
            (None, true) => self.goal,
        };
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        vec![
            flag(self.key_held()),
            flag(self.door_open),
            dist_key,
            dist_door,
            dist_goal,
            self.agent.x as f64 / (SIZE - 1) as f64,
            self.agent.y as f64 / (SIZE - 1) as f64,
            flag(self.dir == 0),
            flag(self.dir == 1),
            flag(self.dir == 2),
            flag(self.dir == 3),
            flag(front == Cell::Key),
            flag(front == Cell::DoorClosed || front == Cell::DoorOpen),
            flag(front == Cell::Wall),
            flag(front == Cell::Goal),
            flag(front == Cell::Floor || front == Cell::DoorOpen),
            (target.x - self.agent.x) as f64 / (SIZE - 2) as f64,
            (target.y - self.agent.y) as f64 / (SIZE - 2) as f64,
        ]
    }

    fn render(&self) -> String {
        let mut rows = Vec::new();
        for y in 0..SIZE {
            let mut row = String::new();
            for x in 0..SIZE {
                let p = Pos::new(x, y);
                let ch = if p == self.agent {
                    ['>', 'v', '<', '^'][self.dir as usize]
                } else {
                    match self.cell(p) {
                        Cell::Wall => '#',
                        Cell::Floor => '.',
                        Cell::Key => 'K',
                        Cell::DoorClosed => 'D',
                        Cell::DoorOpen => '_',
                        Cell::Goal => 'G',
                    }
                };
                row.push(ch);
            }
            rows.push(row);
        }
        let facing = ["east", "south", "west", "north"][self.dir as usize];
        let key = if self.key_held() {
            "The agent is carrying the key."
        } else {
            "The key lies on the floor."
        };
        let door = if self.door_open {
            "The door is open."
        } else {
            "The door is locked."
        };
        format!(
            "{}\nAgent at ({}, {}) facing {facing}. {key} {door}",
            rows.join("\n"),
            self.agent.x,
            self.agent.y
        )
    }
}

/// Progress computed from DoorKey features: phase base 0, 1/3, 2/3, 1 plus a
/// within-phase term 0.3/(1+d). Before pickup d is the walking distance to the
/// key plus the distance to the door, since optimal routes may step away from
/// the key to approach it from the door side; afterwards d is the walking
/// distance to the next subgoal.
pub fn doorkey_progress(features: &[f64]) -> f64 {
    let key_held = features[0] > 0.5;
    let door_open = features[1] > 0.5;
    let (base, d) = match (key_held, door_open) {
        (false, _) => (0.0, features[2] + features[3]),
        (true, false) => (1.0 / 3.0, features[3]),
        (true, true) => {
            if features[4] <= 0.0 {
                return 1.0;
            }
            (2.0 / 3.0, features[4])
        }
    };
    base + 0.3 / (1.0 + d.max(0.0))
}

#[derive(Debug, Clone)]
pub struct DoorKeyEnv {
    spec: EnvSpec,
    state: DoorKeyState,
    steps: usize,
    done: bool,
    episode_id: String,
}

impl Default for DoorKeyEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl DoorKeyEnv {
    pub fn new() -> Self {
        Self::with_max_steps(DEFAULT_MAX_STEPS)
    }

    pub fn with_max_steps(max_steps: usize) -> Self {
        let spec = EnvSpec::new(
            "doorkey",
            ACTIONS.iter().map(|s| s.to_string()).collect(),
            DOORKEY_FEATURES.len(),
            max_steps,
        )
        .expect("static spec is valid");
        let mut env = Self {
            spec,
            state: DoorKeyState::enumerate_initial()[0],
            steps: 0,
            done: false,
            episode_id: "doorkey-s0".into(),
        };
        env.reset(0);
        env
    }

    pub fn state(&self) -> &DoorKeyState {
        &self.state
    }

    /// Places the agent in an explicit state with a fresh step budget.
    pub fn set_state(&mut self, state: DoorKeyState) {
        self.state = state;
        self.steps = 0;
        self.done = state.at_goal();
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn observe_state(&self, state: &DoorKeyState, step_index: u64) -> Observation {
        Observation {
            env_id: self.spec.env_id.clone(),
            episode_id: self.episode_id.clone(),
            step_index,
            text_render: state.render(),
            features: state.features(),
            state_key: state_key(&state.canonical()),
        }
    }
}

impl Environment for DoorKeyEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn feature_names(&self) -> Vec<String> {
        DOORKEY_FEATURES.iter().map(|s| s.to_string()).collect()
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wall_x = rng.gen_range(2..=3);
        let door_y = rng.gen_range(1..SIZE - 1);
        let key = Pos::new(rng.gen_range(1..wall_x), rng.gen_range(1..SIZE - 1));
        let agent = loop {
            let p = Pos::new(rng.gen_range(1..wall_x), rng.gen_range(1..SIZE - 1));
            if p != key {
                break p;
            }
        };
        let dir = rng.gen_range(0..4u8);
        self.state = DoorKeyState {
            wall_x,
            door: Pos::new(wall_x, door_y),
            door_open: false,
            key: Some(key),
            agent,
            dir,
            goal: Pos::new(SIZE - 2, SIZE - 2),
        };
        self.steps = 0;
        self.done = false;
        self.episode_id = format!("doorkey-s{seed}");
        self.observe()
    }

    fn step(&mut self, action_id: usize) -> Result<StepOutcome> {
        check_step(self.done, action_id, &self.spec)?;
        let event = self.state.apply(action_id);
        self.steps += 1;
        let reached = event == Some(EnvEvent::Goal);
        let truncated = !reached && self.steps >= self.spec.max_episode_steps;
        self.done = reached || truncated;
        Ok(StepOutcome {
            obs: self.observe(),
            reward: if reached { 1.0 } else { 0.0 },
            done: self.done,
            truncated,
            event,
        })
    }

    fn observe(&self) -> Observation {
        self.observe_state(&self.state, self.steps as u64)
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn progress(&self, obs: &Observation) -> Result<f64> {
        self.check_foreign(obs)?;
        Ok(doorkey_progress(&obs.features))
    }
}

/// Breadth-first planner over full DoorKey states. Returns the minimal number
/// of actions to reach the goal from every state reachable from `start`, or
/// `None` for states that cannot reach it.
pub fn shortest_action_counts(
    start: DoorKeyState,
) -> std::collections::HashMap<DoorKeyState, usize> {
    use std::collections::HashMap;
    // forward reachability
    let mut seen = vec![start];
    let mut index: HashMap<DoorKeyState, usize> = HashMap::from([(start, 0)]);
    let mut edges: Vec<Vec<usize>> = Vec::new();
    let mut i = 0;
    while i < seen.len() {
        let s = seen[i];
        let mut out = Vec::new();
        if !s.at_goal() {
            for a in 0..ACTIONS.len() {
                let (n, _) = s.successor(a);
                let id = *index.entry(n).or_insert_with(|| {
                    seen.push(n);
                    seen.len() - 1
                });
                out.push(id);
            }
        }
        edges.push(out);
        i += 1;
    }
    // reverse BFS from goal states
    let mut rev: Vec<Vec<usize>> = vec![Vec::new(); seen.len()];
    for (from, outs) in edges.iter().enumerate() {
        for &to in outs {
            rev[to].push(from);
        }
    }
    let mut cost = vec![usize::MAX; seen.len()];
    let mut queue = VecDeque::new();
    for (id, s) in seen.iter().enumerate() {
        if s.at_goal() {
            cost[id] = 0;
            queue.push_back(id);
        }
    }
    while let Some(id) = queue.pop_front() {
        for &p in &rev[id] {
            if cost[p] == usize::MAX {
                cost[p] = cost[id] + 1;
                queue.push_back(p);
            }
        }
    }
    seen.into_iter()
        .zip(cost)
        .filter(|(_, c)| *c != usize::MAX)
        .collect()
}

/// Deterministic optimal controller: from any state, takes the lowest-index
/// action that decreases the remaining optimal action count.
#[derive(Debug, Clone, Default)]
pub struct DoorKeyPlanner {
    cache: std::collections::HashMap<DoorKeyState, usize>,
}

impl DoorKeyPlanner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cost(&mut self, state: &DoorKeyState) -> Option<usize> {
        if !self.cache.contains_key(state) {
            let table = shortest_action_counts(*state);
            self.cache.extend(table);
        }
        self.cache.get(state).copied()
    }

    pub fn act(&mut self, state: &DoorKeyState) -> usize {
        let Some(here) = self.cost(state) else {
            return FORWARD;
        };
        for a in 0..ACTIONS.len() {
            let (n, _) = state.successor(a);
            if let Some(c) = self.cost(&n) {
                if c + 1 == here {
                    return a;
                }
            }
        }
        FORWARD
    }
}

//! Procedural Non-IID client environments and navigation episodes.
//!
//! Each client owns a connected grid graph whose directed edges carry view
//! feature vectors. A per-client style vector is mixed into every edge
//! feature, so clients are Non-IID by construction. Instructions are
//! produced by a fixed template grammar over the shortest reference path,
//! which keeps vision-language alignment learnable at desk scale.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Strength of the direction / room one-hot components of an edge feature.
const ONE_HOT_GAIN: f64 = 0.7;
/// Half-width of the per-edge uniform noise on the residual dimensions.
const EDGE_NOISE: f64 = 0.2;

pub const DIRECTION_WORDS: [&str; 4] = ["north", "south", "east", "west"];
pub const ROOM_WORDS: [&str; 8] = [
    "lounge", "kitchen", "bedroom", "office", "hall", "studio", "library", "pantry",
];

/// Fixed instruction vocabulary. Token ids are stable across experiments.
pub const TOKEN_GO: u16 = 0;
pub const TOKEN_DIR_BASE: u16 = 1; // north/south/east/west = 1..=4
pub const TOKEN_ENTER: u16 = 5;
pub const TOKEN_THE: u16 = 6;
pub const TOKEN_ROOM: u16 = 7;
pub const TOKEN_STOP: u16 = 8;
pub const TOKEN_ROOM_BASE: u16 = 9; // room attribute words = 9..9+8
pub const VOCAB_SIZE: usize = 17;
/// Longest instruction the grammar can emit for paths up to 8 hops.
pub const MAX_INSTRUCTION_LEN: usize = 8 * 2 + 8 * 4 + 1;

pub fn token_text(id: u16) -> &'static str {
    match id {
        TOKEN_GO => "go",
        1..=4 => DIRECTION_WORDS[(id - TOKEN_DIR_BASE) as usize],
        TOKEN_ENTER => "enter",
        TOKEN_THE => "the",
        TOKEN_ROOM => "room",
        TOKEN_STOP => "stop",
        _ => ROOM_WORDS[(id - TOKEN_ROOM_BASE) as usize],
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("no start/goal pair at distance {min}..={max} in client {client_id}")]
    NoEpisodeAtDistance { client_id: u64, min: usize, max: usize },
    #[error("serialization: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad record: {0}")]
    BadRecord(String),
}

/// Generation knobs for one client environment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EnvSpec {
    pub grid_w: usize,
    pub grid_h: usize,
    /// View feature dimension D.
    pub feature_dim: usize,
    pub max_degree: usize,
    pub room_attr_count: usize,
    /// Probability of keeping a non-tree grid edge.
    pub edge_keep_prob: f64,
    /// Half-width of the per-client style offset distribution.
    pub style_half_width: f64,
    /// Reference path length bounds, in hops.
    pub min_hops: usize,
    pub max_hops: usize,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            grid_w: 6,
            grid_h: 6,
            feature_dim: 16,
            max_degree: 4,
            room_attr_count: 6,
            edge_keep_prob: 0.6,
            style_half_width: 0.3,
            min_hops: 3,
            max_hops: 8,
        }
    }
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let n = self.grid_w * self.grid_h;
        if self.grid_w == 0 || self.grid_h == 0 || n < 2 {
            return Err(EnvError::InvalidSpec("grid must hold at least 2 viewpoints".into()));
        }
        if self.feature_dim < 4 + self.room_attr_count {
            return Err(EnvError::InvalidSpec(format!(
                "feature_dim {} too small for 4 directions + {} room attributes",
                self.feature_dim, self.room_attr_count
            )));
        }
        if self.room_attr_count == 0 || self.room_attr_count > ROOM_WORDS.len() {
            return Err(EnvError::InvalidSpec(format!(
                "room_attr_count must be in 1..={}",
                ROOM_WORDS.len()
            )));
        }
        if self.max_degree == 0 || (self.max_degree == 1 && n > 2) {
            return Err(EnvError::InvalidSpec(
                "grid cannot host a connected graph under this max_degree".into(),
            ));
        }
        if self.min_hops == 0 || self.min_hops > self.max_hops {
            return Err(EnvError::InvalidSpec("need 1 <= min_hops <= max_hops".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Viewpoint {
    pub id: u32,
    pub x: u16,
    pub y: u16,
    pub room_attribute: u8,
}

/// One client's world: a connected grid graph with per-directed-edge view
/// features and a client-specific style offset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EnvironmentGraph {
    pub client_id: u64,
    pub viewpoints: Vec<Viewpoint>,
    /// Sorted neighbor ids per viewpoint.
    pub adjacency: Vec<Vec<u32>>,
    /// `edge_features[v][i]` is the view feature of the directed traversal
    /// `v -> adjacency[v][i]`.
    pub edge_features: Vec<Vec<Vec<f64>>>,
    pub style_vector: Vec<f64>,
}

impl EnvironmentGraph {
    pub fn num_viewpoints(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.style_vector.len()
    }

    /// BFS hop distances from `from` to every viewpoint.
    pub fn bfs_distances(&self, from: u32) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.viewpoints.len()];
        let mut queue = VecDeque::new();
        dist[from as usize] = 0;
        queue.push_back(from);
        while let Some(v) = queue.pop_front() {
            for &w in &self.adjacency[v as usize] {
                if dist[w as usize] == u32::MAX {
                    dist[w as usize] = dist[v as usize] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.bfs_distances(0).iter().all(|&d| d != u32::MAX)
    }

    /// Next hop from `v` toward `goal` along a shortest path, with the
    /// lowest-id neighbor breaking ties. Returns `None` when `v == goal`.
    pub fn next_hop(&self, dist_to_goal: &[u32], v: u32, goal: u32) -> Option<u32> {
        if v == goal {
            return None;
        }
        self.adjacency[v as usize]
            .iter()
            .copied()
            .min_by_key(|&w| (dist_to_goal[w as usize], w))
    }
}

fn direction(from: &Viewpoint, to: &Viewpoint) -> u16 {
    if to.y + 1 == from.y {
        0 // north
    } else if to.y == from.y + 1 {
        1 // south
    } else if to.x == from.x + 1 {
        2 // east
    } else {
        3 // west
    }
}

/// Render the fixed-template instruction for a reference path.
pub fn instruction_for_path(env: &EnvironmentGraph, path: &[u32]) -> Vec<u16> {
    let mut tokens = Vec::new();
    for pair in path.windows(2) {
        let (v, w) = (&env.viewpoints[pair[0] as usize], &env.viewpoints[pair[1] as usize]);
        tokens.push(TOKEN_GO);
        tokens.push(TOKEN_DIR_BASE + direction(v, w));
        if w.room_attribute != v.room_attribute {
            tokens.push(TOKEN_ENTER);
            tokens.push(TOKEN_THE);
            tokens.push(TOKEN_ROOM_BASE + w.room_attribute as u16);
            tokens.push(TOKEN_ROOM);
        }
    }
    tokens.push(TOKEN_STOP);
    tokens
}

/// One navigation task over a client environment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Episode {
    pub env_ref: u64,
    pub instruction: Vec<u16>,
    pub start: u32,
    pub goal: u32,
    /// Candidate indices per step; the final entry is the STOP index.
    pub teacher_actions: Vec<usize>,
    pub reference_path: Vec<u32>,
}

/// Generate one client environment as a pure function of
/// `(global_seed, client_id, spec)`.
pub fn generate_environment(
    global_seed: u64,
    client_id: u64,
    spec: &EnvSpec,
) -> Result<EnvironmentGraph, EnvError> {
    spec.validate()?;
    let mut rng = rng::stream(global_seed, "env", client_id, 0);
    let n = spec.grid_w * spec.grid_h;
    let d = spec.feature_dim;

    let style_vector: Vec<f64> = (0..d)
        .map(|_| rng.gen_range(-spec.style_half_width..=spec.style_half_width))
        .collect();

    // Room attributes are assigned per 3x3 block so instructions mention a
    // room change only occasionally.
    let blocks_x = spec.grid_w.div_ceil(3);
    let block_attr: Vec<u8> = (0..blocks_x * spec.grid_h.div_ceil(3))
        .map(|_| rng.gen_range(0..spec.room_attr_count as u8))
        .collect();
    let viewpoints: Vec<Viewpoint> = (0..n)
        .map(|i| {
            let (x, y) = (i % spec.grid_w, i / spec.grid_w);
            Viewpoint {
                id: i as u32,
                x: x as u16,
                y: y as u16,
                room_attribute: block_attr[(y / 3) * blocks_x + x / 3],
            }
        })
        .collect();

    // All grid edges as candidates, then a degree-capped random spanning
    // tree plus a random subset of the remaining edges.
    let mut candidates: Vec<(u32, u32)> = Vec::new();
    for v in 0..n {
        let (x, y) = (v % spec.grid_w, v / spec.grid_w);
        if x + 1 < spec.grid_w {
            candidates.push((v as u32, (v + 1) as u32));
        }
        if y + 1 < spec.grid_h {
            candidates.push((v as u32, (v + spec.grid_w) as u32));
        }
    }

    let mut adjacency: Vec<Vec<u32>> = Vec::new();
    'attempt: for _ in 0..50 {
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut in_tree = vec![false; n];
        in_tree[0] = true;
        let mut frontier: Vec<(u32, u32)> =
            candidates.iter().copied().filter(|&(a, b)| a == 0 || b == 0).collect();
        let mut remaining = n - 1;
        while remaining > 0 {
            frontier.retain(|&(a, b)| in_tree[a as usize] != in_tree[b as usize]);
            let usable: Vec<(u32, u32)> = frontier
                .iter()
                .copied()
                .filter(|&(a, b)| {
                    adj[a as usize].len() < spec.max_degree && adj[b as usize].len() < spec.max_degree
                })
                .collect();
            let Some(&(a, b)) = usable.choose(&mut rng) else { continue 'attempt };
            adj[a as usize].push(b);
            adj[b as usize].push(a);
            let new = if in_tree[a as usize] { b } else { a };
            in_tree[new as usize] = true;
            remaining -= 1;
            for &(x, y) in &candidates {
                if x == new || y == new {
                    frontier.push((x, y));
                }
            }
        }
        // Extra edges keep the graph from being a bare tree.
        for &(a, b) in &candidates {
            if adj[a as usize].contains(&b) {
                continue;
            }
            if adj[a as usize].len() < spec.max_degree
                && adj[b as usize].len() < spec.max_degree
                && rng.gen_bool(spec.edge_keep_prob)
            {
                adj[a as usize].push(b);
                adj[b as usize].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adjacency = adj;
        break;
    }
    if adjacency.is_empty() {
        return Err(EnvError::InvalidSpec(
            "grid cannot host a connected graph of the requested degree".into(),
        ));
    }

    let room_count = spec.room_attr_count;
    let mut edge_features: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for v in 0..n {
        let mut per_edge = Vec::with_capacity(adjacency[v].len());
        for &w in &adjacency[v] {
            let mut f = vec![0.0; d];
            let dir = direction(&viewpoints[v], &viewpoints[w as usize]) as usize;
            f[dir] = ONE_HOT_GAIN;
            f[4 + viewpoints[w as usize].room_attribute as usize] = ONE_HOT_GAIN;
            for slot in f.iter_mut().skip(4 + room_count) {
                *slot = rng.gen_range(-EDGE_NOISE..=EDGE_NOISE);
            }
            for (slot, s) in f.iter_mut().zip(&style_vector) {
                *slot = (*slot + s).clamp(-1.0, 1.0);
            }
            per_edge.push(f);
        }
        edge_features.push(per_edge);
    }

    Ok(EnvironmentGraph { client_id, viewpoints, adjacency, edge_features, style_vector })
}

/// Sample `count` episodes whose reference paths are shortest paths with
/// hop length inside the spec bounds.
pub fn generate_episodes(
    env: &EnvironmentGraph,
    count: usize,
    seed: u64,
    spec: &EnvSpec,
) -> Result<Vec<Episode>, EnvError> {
    assert!(count >= 1, "count must be >= 1");
    let mut rng = rng::stream(seed, "episodes", env.client_id, 0);
    let n = env.num_viewpoints();
    let (min, max) = (spec.min_hops, spec.max_hops);

    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = None;
        for attempt in 0..(n + 64) {
            // Random starts first, then a deterministic sweep so failure
            // means no legal pair exists anywhere.
            let start = if attempt < 64 { rng.gen_range(0..n) as u32 } else { (attempt - 64) as u32 };
            let dist = env.bfs_distances(start);
            let goals: Vec<u32> = (0..n as u32)
                .filter(|&g| {
                    let d = dist[g as usize] as usize;
                    g != start && d >= min && d <= max
                })
                .collect();
            if let Some(&goal) = goals.choose(&mut rng) {
                pick = Some((start, goal));
                break;
            }
        }
        let Some((start, goal)) = pick else {
            return Err(EnvError::NoEpisodeAtDistance { client_id: env.client_id, min, max });
        };

        let dist_to_goal = env.bfs_distances(goal);
        let mut reference_path = vec![start];
        let mut teacher_actions = Vec::new();
        let mut v = start;
        while v != goal {
            let w = env.next_hop(&dist_to_goal, v, goal).expect("connected graph");
            let idx = env.adjacency[v as usize].iter().position(|&x| x == w).unwrap();
            teacher_actions.push(idx);
            reference_path.push(w);
            v = w;
        }
        teacher_actions.push(env.adjacency[goal as usize].len()); // STOP
        episodes.push(Episode {
            env_ref: env.client_id,
            instruction: instruction_for_path(env, &reference_path),
            start,
            goal,
            teacher_actions,
            reference_path,
        });
    }
    Ok(episodes)
}

/// One client's environment plus its local episode set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClientData {
    pub env: EnvironmentGraph,
    pub episodes: Vec<Episode>,
}

/// Train clients, unseen validation environments, and the clean root
/// environment reserved for FLTrust.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FederationData {
    pub train: Vec<ClientData>,
    pub unseen: Vec<ClientData>,
    pub root: ClientData,
}

pub fn build_federation(
    global_seed: u64,
    n_train: usize,
    n_unseen: usize,
    spec: &EnvSpec,
    episodes_per_client: usize,
) -> Result<FederationData, EnvError> {
    assert!(n_train >= 2 && n_unseen >= 1, "need n_train >= 2 and n_unseen >= 1");
    spec.validate()?;
    let build = |client_id: u64, count: usize| -> Result<ClientData, EnvError> {
        let env = generate_environment(global_seed, client_id, spec)?;
        let episodes = generate_episodes(&env, count, global_seed, spec)?;
        Ok(ClientData { env, episodes })
    };
    let train = (0..n_train as u64).map(|c| build(c, episodes_per_client)).collect::<Result<_, _>>()?;
    let unseen = (n_train as u64..(n_train + n_unseen) as u64)
        .map(|c| build(c, episodes_per_client))
        .collect::<Result<_, _>>()?;
    let root = build((n_train + n_unseen) as u64, episodes_per_client)?;
    Ok(FederationData { train, unseen, root })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EnvRecord {
    Environment(EnvironmentGraph),
    Episode(Episode),
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct EnvHeader {
    format: String,
    version: u32,
}

/// Write environments and episodes as line-delimited JSON with a versioned
/// header line. Field order is fixed by the struct definitions, so output
/// is byte-stable for a given input.
pub fn write_env_jsonl<W: Write>(
    mut out: W,
    envs: &[EnvironmentGraph],
    episodes: &[Episode],
) -> Result<(), EnvError> {
    let header = EnvHeader { format: "fedvln-env".into(), version: 1 };
    serde_json::to_writer(&mut out, &header).map_err(io_err)?;
    out.write_all(b"\n")?;
    for env in envs {
        serde_json::to_writer(&mut out, &EnvRecord::Environment(env.clone())).map_err(io_err)?;
        out.write_all(b"\n")?;
    }
    for ep in episodes {
        serde_json::to_writer(&mut out, &EnvRecord::Episode(ep.clone())).map_err(io_err)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_env_jsonl<R: BufRead>(
    reader: R,
) -> Result<(Vec<EnvironmentGraph>, Vec<Episode>), EnvError> {
    let mut lines = reader.lines();
    let header_line =
        lines.next().ok_or_else(|| EnvError::BadRecord("empty stream".into()))??;
    let header: EnvHeader = serde_json::from_str(&header_line)
        .map_err(|e| EnvError::BadRecord(format!("bad header: {e}")))?;
    if header.format != "fedvln-env" || header.version != 1 {
        return Err(EnvError::BadRecord(format!(
            "unsupported format {}/{}",
            header.format, header.version
        )));
    }
    let mut envs = Vec::new();
    let mut episodes = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| EnvError::BadRecord(e.to_string()))? {
            EnvRecord::Environment(env) => envs.push(env),
            EnvRecord::Episode(ep) => episodes.push(ep),
        }
    }
    Ok((envs, episodes))
}

fn io_err(e: serde_json::Error) -> EnvError {
    EnvError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

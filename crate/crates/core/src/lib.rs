//! Deterministic multi-robot exploration simulator.
//!
//! A team of agents with mutually unknown start poses explores a bounded 2D
//! occupancy world. Each agent maps in its own private frame; a central
//! server detects trajectory overlap between agents through place-recognition
//! descriptors, verifies candidate overlaps by actively extending them, and
//! fuses agents into shared sub-maps once the connection weight passes a
//! threshold. Within each sub-map a hierarchical planner routes the member
//! agents over the remaining frontier subspaces by solving a min-max
//! multi-depot vehicle routing problem, so the longest route across the team
//! stays short.
//!
//! Modules follow the pipeline:
//!
//! - [`world`]: occupancy grid, rigid transforms, simulated range sensor.
//! - [`perception`]: scan descriptors, keyframe segments, sequence matching.
//! - [`nav`]: known-space maps, line of sight, A* search, coarse roadmap.
//! - [`merge`]: connection scoring, ICP transform estimation, the adaptive
//!   merge state machine, and sub-map fusion.
//! - [`explore`]: subspace bookkeeping, viewpoint sampling, TSP local paths,
//!   and the min-max MDVRP global solver.
//! - [`sim`]: the tick-based harness, agent state machines, strategies, and
//!   metrics.
//! - [`render`]: SVG output of runs.
//! - [`cli`]: batch runner and comparison tables behind the `coexplore` binary.

pub mod cli;
pub mod explore;
pub mod merge;
pub mod nav;
pub mod perception;
pub mod render;
pub mod sim;
pub mod world;

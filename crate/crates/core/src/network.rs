//! Loss-free, zero-delay broadcast over the spring-induced graph and the
//! communication event log.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formation::SpringMatrix;

/// Broadcast payload: the sender's exact state and adapted parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub theta_bar: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    pub fn from_spring(spring: &SpringMatrix) -> Self {
        Self { neighbors: (0..spring.len()).map(|i| spring.neighbors(i)).collect() }
    }

    pub fn agents(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }
}

/// Slots `(owner, subject)` that receive `msg`: every neighbor of the sender,
/// then the sender itself.
pub fn broadcast(msg: &Message, topo: &Topology) -> Result<Vec<(usize, usize)>> {
    if msg.sender >= topo.agents() {
        return Err(Error::Protocol(format!("unknown sender {}", msg.sender)));
    }
    let mut out: Vec<(usize, usize)> = topo.neighbors(msg.sender).iter().map(|&j| (j, msg.sender)).collect();
    out.push((msg.sender, msg.sender));
    Ok(out)
}

/// `R_com = 100 N_m / (N T / Δt)`.
pub fn residual_comm_ratio(n_m: usize, agents: usize, t_final: f64, dt: f64) -> f64 {
    100.0 * n_m as f64 / (agents as f64 * (t_final / dt).round())
}

/// One broadcast along with both trigger side values at send time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub sender: usize,
    pub ctc1_lhs: f64,
    pub ctc1_rhs: f64,
    pub ctc2_fired: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    dt: f64,
    sends: Vec<Vec<f64>>,
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn new(agents: usize, dt: f64) -> Self {
        Self { dt, sends: vec![Vec::new(); agents], records: Vec::new() }
    }

    /// Appends a send; rejects sends closer than `Δt` to the previous one.
    pub fn record(&mut self, rec: EventRecord) -> Result<()> {
        let times = &mut self.sends[rec.sender];
        if let Some(&last) = times.last() {
            if rec.t - last < self.dt * (1.0 - 1e-9) {
                return Err(Error::Protocol(format!(
                    "agent {} sent at {} and {}, closer than dt = {}",
                    rec.sender, last, rec.t, self.dt
                )));
            }
        }
        times.push(rec.t);
        self.records.push(rec);
        Ok(())
    }

    pub fn n_m(&self) -> usize {
        self.records.len()
    }

    pub fn send_times(&self, agent: usize) -> &[f64] {
        &self.sends[agent]
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    /// Number of consecutive per-agent sends closer than `Δt`.
    pub fn gap_violations(&self) -> usize {
        self.sends
            .iter()
            .map(|ts| ts.windows(2).filter(|w| w[1] - w[0] < self.dt * (1.0 - 1e-9)).count())
            .sum()
    }

    pub fn min_gap(&self) -> Option<f64> {
        self.sends.iter().flat_map(|ts| ts.windows(2).map(|w| w[1] - w[0])).reduce(f64::min)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

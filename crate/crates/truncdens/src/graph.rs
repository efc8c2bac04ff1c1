//! Truncation graph and the NPMLE existence/uniqueness diagnostic.
//!
//! Each record is a vertex; there is a directed edge `i -> j` exactly when
//! `x_j` lies in record `i`'s observation window `[u_i, v_i]`. The NPMLE of
//! the distribution exists and is unique precisely when this graph is
//! strongly connected; if the graph is connected but not strongly connected,
//! the NPMLE does not exist.

use crate::model::TruncatedSample;
use serde::Serialize;

/// Directed graph over the sample's records.
#[derive(Debug, Clone)]
pub struct TruncationGraph {
    adjacency: Vec<Vec<usize>>,
}

impl TruncationGraph {
    /// O(n^2) construction from the edge rule `i -> j iff x_j in [u_i, v_i]`.
    /// Every vertex carries a self-loop since `x_i in [u_i, v_i]` by
    /// validation.
    pub fn build(sample: &TruncatedSample) -> Self {
        let records = sample.records();
        let adjacency = records
            .iter()
            .map(|ri| {
                records
                    .iter()
                    .enumerate()
                    .filter(|(_, rj)| ri.u <= rj.x && rj.x <= ri.v)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        Self { adjacency }
    }

    pub fn vertex_count(&self) -> usize {
        self.adjacency.len()
    }

    /// Out-neighbours of vertex `i`, in increasing vertex order.
    pub fn out_edges(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    /// Strongly connected components, each sorted, in discovery order
    /// (iterative Tarjan).
    pub fn strongly_connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.vertex_count();
        let mut index = vec![usize::MAX; n];
        let mut lowlink = vec![0usize; n];
        let mut on_stack = vec![false; n];
        let mut stack = Vec::new();
        let mut next_index = 0usize;
        let mut components = Vec::new();
        // (vertex, position in its adjacency list)
        let mut call_stack: Vec<(usize, usize)> = Vec::new();

        for start in 0..n {
            if index[start] != usize::MAX {
                continue;
            }
            call_stack.push((start, 0));
            index[start] = next_index;
            lowlink[start] = next_index;
            next_index += 1;
            stack.push(start);
            on_stack[start] = true;

            while let Some(&mut (v, ref mut pos)) = call_stack.last_mut() {
                if *pos < self.adjacency[v].len() {
                    let w = self.adjacency[v][*pos];
                    *pos += 1;
                    if index[w] == usize::MAX {
                        index[w] = next_index;
                        lowlink[w] = next_index;
                        next_index += 1;
                        stack.push(w);
                        on_stack[w] = true;
                        call_stack.push((w, 0));
                    } else if on_stack[w] {
                        lowlink[v] = lowlink[v].min(index[w]);
                    }
                } else {
                    call_stack.pop();
                    if let Some(&(parent, _)) = call_stack.last() {
                        lowlink[parent] = lowlink[parent].min(lowlink[v]);
                    }
                    if lowlink[v] == index[v] {
                        let mut component = Vec::new();
                        loop {
                            let w = stack.pop().expect("tarjan stack underflow");
                            on_stack[w] = false;
                            component.push(w);
                            if w == v {
                                break;
                            }
                        }
                        component.sort_unstable();
                        components.push(component);
                    }
                }
            }
        }
        components
    }

    /// Whether the underlying undirected graph is connected.
    pub fn is_connected_undirected(&self) -> bool {
        let n = self.vertex_count();
        if n == 0 {
            return false;
        }
        let mut undirected = vec![Vec::new(); n];
        for (i, nbrs) in self.adjacency.iter().enumerate() {
            for &j in nbrs {
                undirected[i].push(j);
                undirected[j].push(i);
            }
        }
        let mut seen = vec![false; n];
        let mut queue = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop() {
            for &w in &undirected[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push(w);
                }
            }
        }
        count == n
    }

    /// A vertex whose out-edges all stay inside its own component, i.e. a
    /// member of a sink component. `None` when the graph is strongly
    /// connected (the only component is the whole graph).
    pub fn sink_vertex(&self, components: &[Vec<usize>]) -> Option<usize> {
        if components.len() <= 1 {
            return None;
        }
        let n = self.vertex_count();
        let mut component_of = vec![0usize; n];
        for (ci, comp) in components.iter().enumerate() {
            for &v in comp {
                component_of[v] = ci;
            }
        }
        for comp in components {
            let ci = component_of[comp[0]];
            let is_sink = comp
                .iter()
                .all(|&v| self.adjacency[v].iter().all(|&w| component_of[w] == ci));
            if is_sink {
                return Some(comp[0]);
            }
        }
        None
    }
}

/// Verdict on NPMLE existence and uniqueness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NpmleExistence {
    /// Graph strongly connected: a unique NPMLE exists.
    UniqueExists,
    /// Graph connected but not strongly connected: no NPMLE exists.
    DoesNotExist,
    /// Underlying undirected graph disconnected; the theory gives no verdict.
    Disconnected,
}

/// Existence verdict plus the strongly connected components it rests on.
#[derive(Debug, Clone, Serialize)]
pub struct NpmleStatus {
    pub existence: NpmleExistence,
    pub components: Vec<Vec<usize>>,
}

impl NpmleStatus {
    pub fn from_graph(graph: &TruncationGraph) -> Self {
        let components = graph.strongly_connected_components();
        let existence = if components.len() == 1 {
            NpmleExistence::UniqueExists
        } else if graph.is_connected_undirected() {
            NpmleExistence::DoesNotExist
        } else {
            NpmleExistence::Disconnected
        };
        Self {
            existence,
            components,
        }
    }
}

/// Builds the truncation graph and classifies NPMLE existence.
pub fn npmle_status(sample: &TruncatedSample) -> NpmleStatus {
    NpmleStatus::from_graph(&TruncationGraph::build(sample))
}

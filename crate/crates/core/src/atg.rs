//! Adversarial training graph: a signed complete graph over clean samples and
//! their adversarial counterparts.
//!
//! The full graph over `2n` nodes is never materialized; it is derived from the
//! label vector on demand. Node `2i` is the clean sample `i`, node `2i + 1` its
//! adversarial counterpart, and both carry label `y_i`. Every unordered node
//! pair falls into exactly one of three link sets:
//!
//! * counterpart links — a clean sample and its own adversarial sample
//! * intra-class links — same class, not counterparts
//! * negative links — different classes
//!
//! Only per-batch subgraphs are materialized, which is all the loss ever
//! consumes.

use serde::{Deserialize, Serialize};

use crate::error::{AtfsError, Result};

/// Identifier of a node in the graph. Even indices are clean samples, odd
/// indices their adversarial counterparts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl NodeId {
    /// Node of the clean sample `i`.
    pub fn clean(sample: usize) -> Self {
        NodeId(2 * sample)
    }

    /// Node of the adversarial counterpart of sample `i`.
    pub fn adversarial(sample: usize) -> Self {
        NodeId(2 * sample + 1)
    }

    /// Index of the underlying sample.
    pub fn sample(self) -> usize {
        self.0 / 2
    }

    pub fn is_clean(self) -> bool {
        self.0 % 2 == 0
    }

    /// The other node of the same sample.
    pub fn counterpart(self) -> Self {
        NodeId(self.0 ^ 1)
    }
}

/// Which of the three link sets a node pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkKind {
    /// Clean sample to its own adversarial counterpart (positive).
    Counterpart,
    /// Same class, not counterparts (positive).
    IntraClass,
    /// Different classes (negative).
    Negative,
}

impl LinkKind {
    pub fn is_positive(self) -> bool {
        !matches!(self, LinkKind::Negative)
    }
}

/// Per-kind link weights. `eta1` weights counterpart links, `eta2` intra-class
/// links and `eta3` negative links. `eta3` does not enter the simplified loss;
/// it is kept for the expanded-form score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkWeights {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
}

impl Default for LinkWeights {
    fn default() -> Self {
        LinkWeights {
            eta1: 1.0,
            eta2: 1.0,
            eta3: 1.0,
        }
    }
}

impl LinkWeights {
    pub fn new(eta1: f64, eta2: f64, eta3: f64) -> Result<Self> {
        let w = LinkWeights { eta1, eta2, eta3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("eta3", self.eta3),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(AtfsError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }

    /// Weight assigned to a link of the given kind.
    pub fn weight_of(&self, kind: LinkKind) -> f64 {
        match kind {
            LinkKind::Counterpart => self.eta1,
            LinkKind::IntraClass => self.eta2,
            LinkKind::Negative => self.eta3,
        }
    }
}

/// The adversarial training graph. Stores only the label vector and link
/// weights; links are classified on demand from labels and node parity.
#[derive(Debug, Clone)]
pub struct Atg {
    labels: Vec<usize>,
    weights: LinkWeights,
}

/// A link inside a [`BatchSubgraph`], in local node indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    /// Local index of the first endpoint (`u < v`).
    pub u: usize,
    /// Local index of the second endpoint.
    pub v: usize,
    pub kind: LinkKind,
    pub weight: f64,
}

/// The subgraph induced by a minibatch: the clean and adversarial nodes of the
/// batch samples plus every link among them, split by kind.
///
/// Node order is interleaved: local node `2k` is the clean node of the k-th
/// batch sample and `2k + 1` its adversarial node, so local parity matches the
/// global convention. Feature matrices fed to the loss must use this row
/// order.
#[derive(Debug, Clone)]
pub struct BatchSubgraph {
    /// Global node ids, in local order.
    pub nodes: Vec<NodeId>,
    /// Class label of each local node.
    pub node_labels: Vec<usize>,
    pub counterpart_links: Vec<Link>,
    pub intra_links: Vec<Link>,
    pub negative_links: Vec<Link>,
    /// Number of positive links incident to each local node. At least 1:
    /// the counterpart link always exists.
    pub positive_degree: Vec<usize>,
}

impl BatchSubgraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// All links of the subgraph in kind order (counterpart, intra, negative).
    pub fn all_links(&self) -> impl Iterator<Item = &Link> {
        self.counterpart_links
            .iter()
            .chain(self.intra_links.iter())
            .chain(self.negative_links.iter())
    }

    /// Links incident to the local node, as (other endpoint, kind, weight).
    pub fn incident_links(&self, local: usize) -> Vec<(usize, LinkKind, f64)> {
        let mut out = Vec::with_capacity(self.num_nodes().saturating_sub(1));
        for link in self.all_links() {
            if link.u == local {
                out.push((link.v, link.kind, link.weight));
            } else if link.v == local {
                out.push((link.u, link.kind, link.weight));
            }
        }
        out
    }
}

/// Link lists of a single node over the full graph, as returned by
/// [`Atg::links_of_node`].
#[derive(Debug, Clone, PartialEq)]
pub struct NodeLinks {
    /// Exactly one element: the counterpart of the node.
    pub counterpart: Vec<NodeId>,
    pub intra: Vec<NodeId>,
    pub negative: Vec<NodeId>,
}

impl Atg {
    /// Builds the graph over `labels.len()` samples. The graph is logical:
    /// only the labels are stored.
    pub fn new(labels: Vec<usize>, weights: LinkWeights) -> Result<Self> {
        if labels.is_empty() {
            return Err(AtfsError::EmptyLabels);
        }
        weights.validate()?;
        Ok(Atg { labels, weights })
    }

    /// Number of clean samples.
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    /// Number of nodes (clean plus adversarial).
    pub fn num_nodes(&self) -> usize {
        2 * self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn weights(&self) -> LinkWeights {
        self.weights
    }

    pub fn label_of(&self, node: NodeId) -> Result<usize> {
        self.check_node(node)?;
        Ok(self.labels[node.sample()])
    }

    fn check_node(&self, node: NodeId) -> Result<()> {
        if node.0 >= self.num_nodes() {
            return Err(AtfsError::NodeOutOfRange {
                id: node.0,
                nodes: self.num_nodes(),
            });
        }
        Ok(())
    }

    /// Classifies the unordered pair `(u, v)`. Symmetric in its arguments.
    pub fn link_kind(&self, u: NodeId, v: NodeId) -> Result<LinkKind> {
        self.check_node(u)?;
        self.check_node(v)?;
        if u == v {
            return Err(AtfsError::InvalidArgument(format!(
                "no self-link for node {}",
                u.0
            )));
        }
        if u.sample() == v.sample() {
            return Ok(LinkKind::Counterpart);
        }
        if self.labels[u.sample()] == self.labels[v.sample()] {
            Ok(LinkKind::IntraClass)
        } else {
            Ok(LinkKind::Negative)
        }
    }

    /// The three link lists of a node over the whole graph. Together they
    /// partition the remaining `2n - 1` nodes.
    pub fn links_of_node(&self, node: NodeId) -> Result<NodeLinks> {
        self.check_node(node)?;
        let mut links = NodeLinks {
            counterpart: Vec::with_capacity(1),
            intra: Vec::new(),
            negative: Vec::new(),
        };
        for other in (0..self.num_nodes()).map(NodeId) {
            if other == node {
                continue;
            }
            match self.link_kind(node, other)? {
                LinkKind::Counterpart => links.counterpart.push(other),
                LinkKind::IntraClass => links.intra.push(other),
                LinkKind::Negative => links.negative.push(other),
            }
        }
        Ok(links)
    }

    /// Extracts the subgraph induced by the batch samples. Batch indices must
    /// be unique and in range; degrees are computed over the batch only.
    pub fn subgraph_for_batch(&self, batch: &[usize]) -> Result<BatchSubgraph> {
        let n = self.num_samples();
        let mut seen = vec![false; n];
        for &index in batch {
            if index >= n {
                return Err(AtfsError::SampleOutOfRange { index, samples: n });
            }
            if seen[index] {
                return Err(AtfsError::DuplicateSample(index));
            }
            seen[index] = true;
        }

        let mut nodes = Vec::with_capacity(2 * batch.len());
        let mut node_labels = Vec::with_capacity(2 * batch.len());
        for &index in batch {
            nodes.push(NodeId::clean(index));
            nodes.push(NodeId::adversarial(index));
            node_labels.push(self.labels[index]);
            node_labels.push(self.labels[index]);
        }

        let m = nodes.len();
        let mut sub = BatchSubgraph {
            nodes,
            node_labels,
            counterpart_links: Vec::with_capacity(batch.len()),
            intra_links: Vec::new(),
            negative_links: Vec::new(),
            positive_degree: vec![0; m],
        };
        for u in 0..m {
            for v in (u + 1)..m {
                let kind = self.link_kind(sub.nodes[u], sub.nodes[v])?;
                let link = Link {
                    u,
                    v,
                    kind,
                    weight: self.weights.weight_of(kind),
                };
                match kind {
                    LinkKind::Counterpart => sub.counterpart_links.push(link),
                    LinkKind::IntraClass => sub.intra_links.push(link),
                    LinkKind::Negative => sub.negative_links.push(link),
                }
                if kind.is_positive() {
                    sub.positive_degree[u] += 1;
                    sub.positive_degree[v] += 1;
                }
            }
        }
        Ok(sub)
    }
}

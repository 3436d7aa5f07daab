//! The multi-branch network: a shared trunk, C auxiliary (C-1)-way heads,
//! one C-way target head, and the pairwise uncertainty estimation module.
//!
//! The trunk is one affine+relu layer (feature_dim -> trunk_width). Every
//! head is affine+relu (trunk_width -> head_hidden) followed by an affine
//! map to its logits. The relu output of a head's hidden layer is that
//! branch's semantic feature; pairwise cosine statistics and the similarity
//! matrices are computed on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::losses::LatentDistribution;

/// Widths of the toy backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSizes {
    pub trunk_width: usize,
    pub head_hidden: usize,
}

impl Default for LayerSizes {
    fn default() -> Self {
        LayerSizes { trunk_width: 32, head_hidden: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl AffineParams {
    /// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), bias zero.
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        AffineParams { w: Tensor::new(fan_in, fan_out, data), b: Tensor::zeros(1, fan_out) }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        AffineParams { w: Tensor::zeros(fan_in, fan_out), b: Tensor::zeros(1, fan_out) }
    }
}

/// One branch head: hidden layer producing the branch's semantic features,
/// plus the affine classifier on top.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden: AffineParams,
    pub out: AffineParams,
}

impl Head {
    fn init(trunk_width: usize, head_hidden: usize, logits: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            hidden: AffineParams::init(trunk_width, head_hidden, rng),
            out: AffineParams::init(head_hidden, logits, rng),
        }
    }
}

/// Shared trunk plus the C-way target head (branch 0) and C auxiliary
/// (C-1)-way heads (branches 1..=C).
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSet {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub sizes: LayerSizes,
    pub trunk: AffineParams,
    pub target: Head,
    pub aux: Vec<Head>,
}

impl BranchSet {
    pub fn init(num_classes: usize, feature_dim: usize, sizes: LayerSizes, rng: &mut ChaCha8Rng) -> Self {
        assert!(num_classes >= 2);
        let trunk = AffineParams::init(feature_dim, sizes.trunk_width, rng);
        let target = Head::init(sizes.trunk_width, sizes.head_hidden, num_classes, rng);
        let aux = (0..num_classes)
            .map(|_| Head::init(sizes.trunk_width, sizes.head_hidden, num_classes - 1, rng))
            .collect();
        BranchSet { num_classes, feature_dim, sizes, trunk, target, aux }
    }

    /// All-zero parameters (tests).
    pub fn zeroed(num_classes: usize, feature_dim: usize, sizes: LayerSizes) -> Self {
        BranchSet {
            num_classes,
            feature_dim,
            sizes,
            trunk: AffineParams::zeros(feature_dim, sizes.trunk_width),
            target: Head {
                hidden: AffineParams::zeros(sizes.trunk_width, sizes.head_hidden),
                out: AffineParams::zeros(sizes.head_hidden, num_classes),
            },
            aux: (0..num_classes)
                .map(|_| Head {
                    hidden: AffineParams::zeros(sizes.trunk_width, sizes.head_hidden),
                    out: AffineParams::zeros(sizes.head_hidden, num_classes - 1),
                })
                .collect(),
        }
    }

    /// Logit width of branch `j` (0 is the target branch).
    pub fn branch_width(&self, j: usize) -> usize {
        assert!(j <= self.num_classes, "branch index {j} out of range");
        if j == 0 {
            self.num_classes
        } else {
            self.num_classes - 1
        }
    }

    /// Visits every trainable tensor in a fixed order. The same order is
    /// used for binding graph nodes, for optimizer state, and for
    /// checkpoints.
    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor)) {
        f("trunk.w".into(), &self.trunk.w);
        f("trunk.b".into(), &self.trunk.b);
        visit_head("target", &self.target, f);
        for (i, head) in self.aux.iter().enumerate() {
            visit_head(&format!("aux{}", i + 1), head, f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("trunk.w".into(), &mut self.trunk.w);
        f("trunk.b".into(), &mut self.trunk.b);
        visit_head_mut("target", &mut self.target, f);
        for (i, head) in self.aux.iter_mut().enumerate() {
            visit_head_mut(&format!("aux{}", i + 1), head, f);
        }
    }

    /// Registers every parameter as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundBranchSet {
        self.bind_with(g, true, Graph::param)
    }

    /// Registers only the trunk and target head as trainable leaves, for
    /// runs where the auxiliary scaffold is inactive.
    pub fn bind_trunk_target(&self, g: &mut Graph) -> BoundBranchSet {
        self.bind_with(g, false, Graph::param)
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_constant(&self, g: &mut Graph) -> BoundBranchSet {
        self.bind_with(g, true, Graph::constant)
    }

    fn bind_with(
        &self,
        g: &mut Graph,
        include_aux: bool,
        mut reg: impl FnMut(&mut Graph, &Tensor) -> NodeId,
    ) -> BoundBranchSet {
        let trunk_w = reg(g, &self.trunk.w);
        let trunk_b = reg(g, &self.trunk.b);
        let bind_head = |g: &mut Graph, h: &Head, reg: &mut dyn FnMut(&mut Graph, &Tensor) -> NodeId| BoundHead {
            hidden_w: reg(g, &h.hidden.w),
            hidden_b: reg(g, &h.hidden.b),
            out_w: reg(g, &h.out.w),
            out_b: reg(g, &h.out.b),
        };
        let target = bind_head(g, &self.target, &mut reg);
        let aux = if include_aux {
            self.aux.iter().map(|h| bind_head(g, h, &mut reg)).collect()
        } else {
            Vec::new()
        };
        BoundBranchSet { target, aux, trunk_w, trunk_b }
    }

    /// Target-branch logits for a feature matrix, outside any training
    /// graph. The deployment model runs the identical code path, so full
    /// and stripped predictions agree bitwise.
    pub fn target_logits(&self, x: &Tensor) -> Tensor {
        target_logits_values(&self.trunk, &self.target, x)
    }
}

fn visit_head(prefix: &str, head: &Head, f: &mut impl FnMut(String, &Tensor)) {
    f(format!("{prefix}.hidden.w"), &head.hidden.w);
    f(format!("{prefix}.hidden.b"), &head.hidden.b);
    f(format!("{prefix}.out.w"), &head.out.w);
    f(format!("{prefix}.out.b"), &head.out.b);
}

fn visit_head_mut(prefix: &str, head: &mut Head, f: &mut impl FnMut(String, &mut Tensor)) {
    f(format!("{prefix}.hidden.w"), &mut head.hidden.w);
    f(format!("{prefix}.hidden.b"), &mut head.hidden.b);
    f(format!("{prefix}.out.w"), &mut head.out.w);
    f(format!("{prefix}.out.b"), &mut head.out.b);
}

/// Graph-bound parameter handles for a [`BranchSet`].
pub struct BoundBranchSet {
    pub trunk_w: NodeId,
    pub trunk_b: NodeId,
    pub target: BoundHead,
    pub aux: Vec<BoundHead>,
}

pub struct BoundHead {
    pub hidden_w: NodeId,
    pub hidden_b: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

/// Shared trunk features: relu(x W + b).
pub fn trunk_forward(g: &mut Graph, bound: &BoundBranchSet, x: NodeId) -> NodeId {
    let h = g.affine(x, bound.trunk_w, bound.trunk_b);
    g.relu(h)
}

/// One head's semantic features and logits from trunk features.
pub fn head_forward(g: &mut Graph, head: &BoundHead, trunk_feats: NodeId) -> (NodeId, NodeId) {
    let h = g.affine(trunk_feats, head.hidden_w, head.hidden_b);
    let feats = g.relu(h);
    let logits = g.affine(feats, head.out_w, head.out_b);
    (feats, logits)
}

/// Logits of branch `j` (0 = target, 1..=C auxiliary) from trunk features.
pub fn branch_forward(g: &mut Graph, bound: &BoundBranchSet, j: usize, trunk_feats: NodeId) -> NodeId {
    let head = if j == 0 {
        &bound.target
    } else {
        assert!(j <= bound.aux.len(), "branch index {j} out of range");
        &bound.aux[j - 1]
    };
    head_forward(g, head, trunk_feats).1
}

/// Maps the C-1 logit positions of auxiliary branch `j` onto class labels:
/// the classes `1..=C` except `j`, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassIndexMap {
    branch: usize,
    classes: Vec<usize>,
}

impl ClassIndexMap {
    pub fn new(branch: usize, num_classes: usize) -> Self {
        assert!(
            (1..=num_classes).contains(&branch),
            "auxiliary branch index {branch} out of 1..={num_classes}"
        );
        ClassIndexMap { branch, classes: (1..=num_classes).filter(|c| *c != branch).collect() }
    }

    pub fn branch(&self) -> usize {
        self.branch
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Class label at a 0-based logit position.
    pub fn class_at(&self, position: usize) -> usize {
        self.classes[position]
    }

    /// 0-based logit position of a class label. `None` for the branch's own
    /// excluded class or an out-of-range label.
    pub fn position_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|c| *c == class)
    }
}

/// Softmax predictions of each sample's own-class auxiliary branch, behind
/// a stop-gradient barrier. `aux_logits[j-1]` must hold branch `j`'s logits
/// for the full batch; the row belonging to each sample annotated `j`
/// becomes its latent distribution.
pub fn predict_latent_distribution(
    g: &mut Graph,
    aux_logits: &[NodeId],
    annotations: &[usize],
) -> Vec<LatentDistribution> {
    let c = aux_logits.len();
    let mut per_branch_probs: Vec<Option<Vec<f64>>> = vec![None; c];
    let mut out = Vec::with_capacity(annotations.len());
    for (pos, &y) in annotations.iter().enumerate() {
        assert!((1..=c).contains(&y), "annotation {y} out of range");
        if per_branch_probs[y - 1].is_none() {
            let frozen = g.stop_gradient(aux_logits[y - 1]);
            let probs = g.row_softmax(frozen);
            per_branch_probs[y - 1] = Some(g.values(probs).to_vec());
        }
        let probs = per_branch_probs[y - 1].as_ref().unwrap();
        let width = c - 1;
        out.push(LatentDistribution::new(
            probs[pos * width..(pos + 1) * width].to_vec(),
            y,
        ));
    }
    out
}

/// The two-layer scorer of the uncertainty estimation module.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyModule {
    /// 2C x C.
    pub w1: Tensor,
    pub b1: Tensor,
    /// Learnable PReLU slope, initialized to 0.25.
    pub prelu_slope: Tensor,
    /// C x 1.
    pub w2: Tensor,
    pub b2: Tensor,
}

impl UncertaintyModule {
    pub fn init(num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = num_classes;
        let w1 = AffineParams::init(2 * c, c, rng);
        let w2 = AffineParams::init(c, 1, rng);
        UncertaintyModule {
            w1: w1.w,
            b1: w1.b,
            prelu_slope: Tensor::scalar(0.25),
            w2: w2.w,
            b2: w2.b,
        }
    }

    /// All weights and biases zero (slope keeps its 0.25 default), so the
    /// cold-start confidence is sigmoid(0) = 0.5 for every sample.
    pub fn zeroed(num_classes: usize) -> Self {
        let c = num_classes;
        UncertaintyModule {
            w1: Tensor::zeros(2 * c, c),
            b1: Tensor::zeros(1, c),
            prelu_slope: Tensor::scalar(0.25),
            w2: Tensor::zeros(c, 1),
            b2: Tensor::zeros(1, 1),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w1.cols()
    }

    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor)) {
        f("uncertainty.w1".into(), &self.w1);
        f("uncertainty.b1".into(), &self.b1);
        f("uncertainty.prelu".into(), &self.prelu_slope);
        f("uncertainty.w2".into(), &self.w2);
        f("uncertainty.b2".into(), &self.b2);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("uncertainty.w1".into(), &mut self.w1);
        f("uncertainty.b1".into(), &mut self.b1);
        f("uncertainty.prelu".into(), &mut self.prelu_slope);
        f("uncertainty.w2".into(), &mut self.w2);
        f("uncertainty.b2".into(), &mut self.b2);
    }

    pub fn bind(&self, g: &mut Graph) -> BoundUncertainty {
        BoundUncertainty {
            w1: g.param(&self.w1),
            b1: g.param(&self.b1),
            slope: g.param(&self.prelu_slope),
            w2: g.param(&self.w2),
            b2: g.param(&self.b2),
        }
    }
}

pub struct BoundUncertainty {
    pub w1: NodeId,
    pub b1: NodeId,
    pub slope: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Per-sample mean cosine similarity against each annotated class, as an
/// N x C node. Row `a`, column `j-1` holds the mean cosine between sample
/// `a`'s feature and all features annotated `j` (the anchor itself included
/// in its own class's mean). Every class must appear in the batch.
pub fn similarity_vector(
    g: &mut Graph,
    features: NodeId,
    annotations: &[usize],
    num_classes: usize,
) -> NodeId {
    let n = annotations.len();
    assert_eq!(g.shape(features).0, n, "features rows vs annotations");
    let mut counts = vec![0usize; num_classes];
    for &y in annotations {
        counts[y - 1] += 1;
    }
    assert!(
        counts.iter().all(|c| *c > 0),
        "similarity_vector requires every class in the batch"
    );
    // pool[i][j] = 1/N_j when sample i is annotated j, else 0, so that
    // cosine_matrix x pool averages per class.
    let mut pool = Tensor::zeros(n, num_classes);
    for (i, &y) in annotations.iter().enumerate() {
        pool.set(i, y - 1, 1.0 / counts[y - 1] as f64);
    }
    let normalized = g.row_l2_normalize(features);
    let normalized_t = g.transpose(normalized);
    let cosine = g.matmul(normalized, normalized_t);
    let pool_id = g.constant(&pool);
    g.matmul(cosine, pool_id)
}

/// Confidence scores alpha in (0,1), one per sample: the class-similarity
/// vector is concatenated with the one-hot annotation and pushed through
/// affine -> PReLU -> affine -> sigmoid.
///
/// The module's own parameters always receive gradient through alpha.
/// `detach_features` cuts the path from alpha back into the semantic
/// features (through the cosine statistics), so the classifier geometry is
/// shaped only by its losses while the scorer still learns.
pub fn estimate_confidence(
    g: &mut Graph,
    features: NodeId,
    annotations: &[usize],
    num_classes: usize,
    um: &BoundUncertainty,
    detach_features: bool,
) -> NodeId {
    let n = annotations.len();
    let sim_input = if detach_features { g.stop_gradient(features) } else { features };
    let sim = similarity_vector(g, sim_input, annotations, num_classes);
    let mut onehot = Tensor::zeros(n, num_classes);
    for (i, &y) in annotations.iter().enumerate() {
        onehot.set(i, y - 1, 1.0);
    }
    let onehot_id = g.constant(&onehot);
    let sv = g.concat_cols(sim, onehot_id);
    let h = g.affine(sv, um.w1, um.b1);
    let act = g.prelu(h, um.slope);
    let score = g.affine(act, um.w2, um.b2);
    g.sigmoid(score)
}

/// Trunk + target head only; what ships after training.
#[derive(Clone, Debug, PartialEq)]
pub struct DeployModel {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub sizes: LayerSizes,
    pub trunk: AffineParams,
    pub target: Head,
}

impl DeployModel {
    pub fn logits(&self, x: &Tensor) -> Tensor {
        target_logits_values(&self.trunk, &self.target, x)
    }

    /// Predicted classes (1-based), ties broken to the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let logits = self.logits(x);
        (0..logits.rows()).map(|i| argmax_class(logits.row(i))).collect()
    }

    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor)) {
        f("trunk.w".into(), &self.trunk.w);
        f("trunk.b".into(), &self.trunk.b);
        visit_head("target", &self.target, f);
    }
}

/// Drops the auxiliary heads (and, implicitly, the uncertainty module),
/// keeping the exact trunk and target parameters.
pub fn strip_for_deployment(model: &BranchSet) -> DeployModel {
    DeployModel {
        num_classes: model.num_classes,
        feature_dim: model.feature_dim,
        sizes: model.sizes,
        trunk: model.trunk.clone(),
        target: model.target.clone(),
    }
}

/// 1-based argmax with ties to the lowest class index.
pub fn argmax_class(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best + 1
}

fn target_logits_values(trunk: &AffineParams, target: &Head, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xi = g.constant(x);
    let tw = g.constant(&trunk.w);
    let tb = g.constant(&trunk.b);
    let h = g.affine(xi, tw, tb);
    let t = g.relu(h);
    let hw = g.constant(&target.hidden.w);
    let hb = g.constant(&target.hidden.b);
    let ow = g.constant(&target.out.w);
    let ob = g.constant(&target.out.b);
    let fh = g.affine(t, hw, hb);
    let f = g.relu(fh);
    let z = g.affine(f, ow, ob);
    g.tensor(z)
}

//! Importance-score strategies: magnitude, movement, and the decomposed
//! PST score |W0 + bUV| + a1*AB + a2*(R + C).
//!
//! The PST factors keep the trainable footprint at (n+k)(r1+r2+1) per
//! layer: U, V carry a rank-r2 weight update on top of the frozen base,
//! A, B carry a rank-r1 learned score term, and R, C are per-row and
//! per-column accumulators updated in closed form each step rather than
//! by gradient descent.

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;
use rand::Rng;

/// Trade-off constants and factor ranks for one PST layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub r1: usize,
    pub r2: usize,
    /// Single trade-off of the undecomposed combined score
    /// |W| + legacy_alpha * movement accumulator; only the combined
    /// criterion reads it.
    pub legacy_alpha: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { alpha1: 1.0, alpha2: 1.0, beta: 1.0, r1: 8, r2: 8, legacy_alpha: 1.0 }
    }
}

/// Which score terms participate; all seven non-empty
/// combinations of {magnitude, low-rank, structured} are valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreVariant {
    pub magnitude: bool,
    pub low_rank: bool,
    pub structured: bool,
}

impl ScoreVariant {
    pub const FULL: Self = Self { magnitude: true, low_rank: true, structured: true };

    /// Parses a `+`-separated subset of `mag`, `ab`, `rc`.
    pub fn parse(token: &str) -> Result<Self> {
        let mut variant = Self { magnitude: false, low_rank: false, structured: false };
        for part in token.split('+') {
            match part.trim() {
                "mag" => variant.magnitude = true,
                "ab" => variant.low_rank = true,
                "rc" => variant.structured = true,
                other => {
                    return Err(Error::contract(format!(
                        "unknown score term {other:?}; expected mag, ab, or rc"
                    )))
                }
            }
        }
        if variant == (Self { magnitude: false, low_rank: false, structured: false }) {
            return Err(Error::contract("score variant selects no terms"));
        }
        Ok(variant)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.magnitude {
            parts.push("mag");
        }
        if self.low_rank {
            parts.push("ab");
        }
        if self.structured {
            parts.push("rc");
        }
        parts.join("+")
    }
}

/// Per-layer PST factor bundle around a frozen base weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreState {
    w0: Tensor2D,
    pub u: Tensor2D,
    pub v: Tensor2D,
    pub a: Tensor2D,
    pub b: Tensor2D,
    pub r: Tensor2D,
    pub c: Tensor2D,
    pub config: ScoreConfig,
}

/// Initialization scale for the Gaussian factors U and A.
pub const FACTOR_INIT_STD: f64 = 0.02;

impl ScoreState {
    /// U, A Gaussian; V, B, R, C zero. The zero halves make the t=0
    /// state exact: effective weight is w0 and the data-driven score
    /// terms vanish.
    pub fn init<R: Rng>(w0: Tensor2D, config: ScoreConfig, rng: &mut R) -> Self {
        let (n, k) = w0.shape();
        Self {
            u: Tensor2D::gaussian(n, config.r2, FACTOR_INIT_STD, rng),
            v: Tensor2D::zeros(config.r2, k),
            a: Tensor2D::gaussian(n, config.r1, FACTOR_INIT_STD, rng),
            b: Tensor2D::zeros(config.r1, k),
            r: Tensor2D::zeros(n, 1),
            c: Tensor2D::zeros(1, k),
            w0,
            config,
        }
    }

    /// Rebuilds a state from checkpointed tensors.
    pub fn from_parts(
        w0: Tensor2D,
        u: Tensor2D,
        v: Tensor2D,
        a: Tensor2D,
        b: Tensor2D,
        r: Tensor2D,
        c: Tensor2D,
        config: ScoreConfig,
    ) -> Result<Self> {
        let (n, k) = w0.shape();
        if u.shape() != (n, config.r2) || v.shape() != (config.r2, k) {
            return Err(Error::shape("score state U/V", u.shape(), v.shape()));
        }
        if a.shape() != (n, config.r1) || b.shape() != (config.r1, k) {
            return Err(Error::shape("score state A/B", a.shape(), b.shape()));
        }
        if r.shape() != (n, 1) || c.shape() != (1, k) {
            return Err(Error::shape("score state R/C", r.shape(), c.shape()));
        }
        Ok(Self { w0, u, v, a, b, r, c, config })
    }

    pub fn w0(&self) -> &Tensor2D {
        &self.w0
    }

    /// Checkpoint-load path; the only writer of w0 after init. Callers
    /// must have verified the shape.
    pub(crate) fn restore_w0(&mut self, w0: Tensor2D) {
        self.w0 = w0;
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w0.shape()
    }

    /// w0 + beta * U * V.
    pub fn effective_weight(&self) -> Tensor2D {
        let update = self.u.matmul(&self.v).expect("factor shapes fixed at init");
        self.w0.add(&update.scale(self.config.beta)).expect("same shape")
    }

    /// Full decomposed score |w0 + bUV| + a1*AB + a2*(R + C).
    pub fn pst_score(&self) -> Tensor2D {
        self.score_variant(ScoreVariant::FULL)
    }

    /// Score assembled from the selected subset of terms.
    pub fn score_variant(&self, variant: ScoreVariant) -> Tensor2D {
        let (n, k) = self.w0.shape();
        let mut score = Tensor2D::zeros(n, k);
        if variant.magnitude {
            score = score.add(&self.effective_weight().abs()).expect("same shape");
        }
        if variant.low_rank {
            let ab = self.a.matmul(&self.b).expect("factor shapes fixed at init");
            score = score.add(&ab.scale(self.config.alpha1)).expect("same shape");
        }
        if variant.structured {
            let rows = self.r.broadcast_col(k).expect("R is nx1");
            let cols = self.c.broadcast_row(n).expect("C is 1xk");
            let structured = rows.add(&cols).expect("same shape");
            score = score.add(&structured.scale(self.config.alpha2)).expect("same shape");
        }
        score
    }

    /// R += -row_sums(grad ⊙ w); C += -col_sums(grad ⊙ w). Additive
    /// across steps, so replaying the per-step contributions reproduces
    /// the accumulators exactly.
    pub fn accumulate_structured(&mut self, grad_w: &Tensor2D, w: &Tensor2D) -> Result<()> {
        if grad_w.shape() != self.w0.shape() {
            return Err(Error::shape("accumulate_structured grad", self.w0.shape(), grad_w.shape()));
        }
        let movement = grad_w.hadamard(w)?;
        self.r = self.r.add(&movement.row_sums().scale(-1.0))?;
        self.c = self.c.add(&movement.col_sums().scale(-1.0))?;
        Ok(())
    }
}

/// Movement-pruning accumulator S = -sum over steps of grad ⊙ w.
#[derive(Debug, Clone, PartialEq)]
pub struct MvPState {
    pub s: Tensor2D,
}

impl MvPState {
    /// Movement-pruning convention: the score starts at the magnitude of
    /// the pretrained weight.
    pub fn init(w_pretrained: &Tensor2D) -> Self {
        Self { s: w_pretrained.abs() }
    }

    /// Zero start, for scores that add the magnitude term explicitly.
    pub fn zeros(n: usize, k: usize) -> Self {
        Self { s: Tensor2D::zeros(n, k) }
    }

    pub fn accumulate(&mut self, grad_w: &Tensor2D, w: &Tensor2D) -> Result<()> {
        if grad_w.shape() != self.s.shape() {
            return Err(Error::shape("mvp_accumulate grad", self.s.shape(), grad_w.shape()));
        }
        self.s = self.s.add(&grad_w.hadamard(w)?.scale(-1.0))?;
        Ok(())
    }
}

/// Elementwise |w|, the magnitude-pruning score.
pub fn map_score(w: &Tensor2D) -> Tensor2D {
    w.abs()
}

/// Trainable parameters of one PST layer: U, V, A, B plus the R, C
/// vectors, i.e. (n + k)(r1 + r2 + 1).
pub fn trainable_param_count(n: usize, k: usize, r1: usize, r2: usize) -> usize {
    (n + k) * (r1 + r2 + 1)
}

/// Dense-score methods train the full weight and a full score matrix.
pub fn movement_param_count(n: usize, k: usize) -> usize {
    2 * n * k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::top_v_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh_state(seed: u64) -> ScoreState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = Tensor2D::gaussian(5, 4, 1.0, &mut rng);
        ScoreState::init(w0, ScoreConfig { r1: 2, r2: 3, ..Default::default() }, &mut rng)
    }

    #[test]
    fn effective_weight_is_w0_at_init() {
        let state = fresh_state(1);
        assert_eq!(state.effective_weight(), *state.w0());
    }

    #[test]
    fn beta_zero_ignores_uv() {
        let mut state = fresh_state(2);
        state.config.beta = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        state.v = Tensor2D::gaussian(3, 4, 1.0, &mut rng);
        assert_eq!(state.effective_weight(), *state.w0());
    }

    #[test]
    fn effective_weight_matches_entrywise_oracle() {
        let mut state = fresh_state(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        state.v = Tensor2D::gaussian(3, 4, 1.0, &mut rng);
        let w = state.effective_weight();

        // Entrywise w0 + beta * sum_l U[i,l] V[l,j], no matmul reuse.
        let (n, k) = state.shape();
        for i in 0..n {
            for j in 0..k {
                let mut dot = 0.0;
                for l in 0..3 {
                    dot += state.u.get(i, l) * state.v.get(l, j);
                }
                let expected = state.w0().get(i, j) + state.config.beta * dot;
                assert!((w.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_score_is_weight_magnitude() {
        let state = fresh_state(6);
        assert_eq!(state.pst_score(), state.w0().abs());
    }

    #[test]
    fn zero_tradeoffs_reduce_to_magnitude_of_adapted_weight() {
        let mut state = fresh_state(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        state.v = Tensor2D::gaussian(3, 4, 1.0, &mut rng);
        state.b = Tensor2D::gaussian(2, 4, 1.0, &mut rng);
        state.r = Tensor2D::gaussian(5, 1, 1.0, &mut rng);
        state.config.alpha1 = 0.0;
        state.config.alpha2 = 0.0;
        assert_eq!(state.pst_score(), state.effective_weight().abs());
    }

    #[test]
    fn two_by_two_score_by_hand() {
        // w0 = [[1,-2],[3,-4]], AB = [[0.5,0],[0,0]], R = [1,0]^T,
        // C = [0,2], alpha1 = alpha2 = 1. Entry (i,j) of the score is
        // |w0_ij| + AB_ij + R_i + C_j.
        let w0 = Tensor2D::from_rows(&[&[1.0, -2.0], &[3.0, -4.0]]);
        let config = ScoreConfig { r1: 1, r2: 1, ..Default::default() };
        let state = ScoreState::from_parts(
            w0,
            Tensor2D::zeros(2, 1),
            Tensor2D::zeros(1, 2),
            Tensor2D::from_rows(&[&[1.0], &[0.0]]),
            Tensor2D::from_rows(&[&[0.5, 0.0]]),
            Tensor2D::from_rows(&[&[1.0], &[0.0]]),
            Tensor2D::from_rows(&[&[0.0, 2.0]]),
            config,
        )
        .unwrap();
        assert_eq!(
            state.pst_score(),
            Tensor2D::from_rows(&[&[2.5, 5.0], &[3.0, 6.0]])
        );
    }

    #[test]
    fn zero_gradient_leaves_accumulators() {
        let mut state = fresh_state(9);
        let before = state.clone();
        let zeros = Tensor2D::zeros(5, 4);
        let w = state.effective_weight();
        state.accumulate_structured(&zeros, &w).unwrap();
        assert_eq!(state.r, before.r);
        assert_eq!(state.c, before.c);
    }

    #[test]
    fn single_step_row_col_sums() {
        let w0 = Tensor2D::ones(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut state = ScoreState::init(w0, ScoreConfig { r1: 1, r2: 1, ..Default::default() }, &mut rng);
        // grad ⊙ w = [[1,2],[3,4]] via w = ones.
        let grad = Tensor2D::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let w = Tensor2D::ones(2, 2);
        state.accumulate_structured(&grad, &w).unwrap();
        assert_eq!(state.r, Tensor2D::from_rows(&[&[-3.0], &[-7.0]]));
        assert_eq!(state.c, Tensor2D::from_rows(&[&[-4.0, -6.0]]));

        // Repeating the identical step doubles both accumulators.
        state.accumulate_structured(&grad, &w).unwrap();
        assert_eq!(state.r, Tensor2D::from_rows(&[&[-6.0], &[-14.0]]));
        assert_eq!(state.c, Tensor2D::from_rows(&[&[-8.0, -12.0]]));
    }

    #[test]
    fn mvp_single_step_sign_flip() {
        let mut mvp = MvPState::zeros(1, 2);
        let grad = Tensor2D::from_rows(&[&[1.0, -1.0]]);
        let w = Tensor2D::ones(1, 2);
        mvp.accumulate(&grad, &w).unwrap();
        assert_eq!(mvp.s, Tensor2D::from_rows(&[&[-1.0, 1.0]]));

        let before = mvp.s.clone();
        mvp.accumulate(&Tensor2D::zeros(1, 2), &w).unwrap();
        assert_eq!(mvp.s, before);
    }

    #[test]
    fn mvp_sums_match_structured_accumulators() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = Tensor2D::gaussian(6, 5, 1.0, &mut rng);
        let mut state =
            ScoreState::init(w0.clone(), ScoreConfig { r1: 2, r2: 2, ..Default::default() }, &mut rng);
        let mut mvp = MvPState::zeros(6, 5);

        // Drive both with the same (grad, weight) stream; also maintain
        // the full movement matrix entrywise as an independent oracle.
        let mut movement = vec![vec![0.0; 5]; 6];
        for _ in 0..7 {
            let grad = Tensor2D::gaussian(6, 5, 1.0, &mut rng);
            let w = Tensor2D::gaussian(6, 5, 1.0, &mut rng);
            state.accumulate_structured(&grad, &w).unwrap();
            mvp.accumulate(&grad, &w).unwrap();
            for i in 0..6 {
                for j in 0..5 {
                    movement[i][j] -= grad.get(i, j) * w.get(i, j);
                }
            }
        }
        for i in 0..6 {
            let row: f64 = movement[i].iter().sum();
            assert!((mvp.s.row_sums().get(i, 0) - row).abs() < 1e-10);
            assert!((state.r.get(i, 0) - row).abs() < 1e-10);
        }
        for j in 0..5 {
            let col: f64 = movement.iter().map(|r| r[j]).sum();
            assert!((mvp.s.col_sums().get(0, j) - col).abs() < 1e-10);
            assert!((state.c.get(0, j) - col).abs() < 1e-10);
        }
    }

    #[test]
    fn map_score_basics() {
        assert_eq!(
            map_score(&Tensor2D::from_rows(&[&[-1.0, 2.0]])),
            Tensor2D::from_rows(&[&[1.0, 2.0]])
        );
    }

    #[test]
    fn fresh_pst_mask_equals_magnitude_mask() {
        let state = fresh_state(12);
        let v = 10;
        let pst = top_v_mask(&state.pst_score(), v).unwrap();
        let map = top_v_mask(&map_score(state.w0()), v).unwrap();
        assert_eq!(pst, map);
    }

    #[test]
    fn magnitude_mask_is_scale_invariant() {
        let state = fresh_state(13);
        let w = state.w0();
        let doubled = w.scale(2.0);
        assert_eq!(
            top_v_mask(&map_score(w), 7).unwrap(),
            top_v_mask(&map_score(&doubled), 7).unwrap()
        );
    }

    #[test]
    fn variant_ab_is_zero_on_fresh_state() {
        let state = fresh_state(14);
        let variant = ScoreVariant::parse("ab").unwrap();
        assert_eq!(state.score_variant(variant), Tensor2D::zeros(5, 4));
    }

    #[test]
    fn variant_full_equals_pst_score() {
        let mut state = fresh_state(15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        state.v = Tensor2D::gaussian(3, 4, 1.0, &mut rng);
        state.b = Tensor2D::gaussian(2, 4, 1.0, &mut rng);
        state.r = Tensor2D::gaussian(5, 1, 1.0, &mut rng);
        state.c = Tensor2D::gaussian(1, 4, 1.0, &mut rng);
        assert_eq!(
            state.score_variant(ScoreVariant::parse("mag+ab+rc").unwrap()),
            state.pst_score()
        );
    }

    #[test]
    fn all_variants_recompose_from_terms() {
        let mut state = fresh_state(17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        state.v = Tensor2D::gaussian(3, 4, 1.0, &mut rng);
        state.b = Tensor2D::gaussian(2, 4, 1.0, &mut rng);
        state.r = Tensor2D::gaussian(5, 1, 1.0, &mut rng);
        state.c = Tensor2D::gaussian(1, 4, 1.0, &mut rng);

        // Individual terms computed directly.
        let mag = state.effective_weight().abs();
        let ab = state.a.matmul(&state.b).unwrap().scale(state.config.alpha1);
        let rc = state
            .r
            .broadcast_col(4)
            .unwrap()
            .add(&state.c.broadcast_row(5).unwrap())
            .unwrap()
            .scale(state.config.alpha2);

        for token in ["mag", "ab", "rc", "mag+ab", "mag+rc", "ab+rc", "mag+ab+rc"] {
            let variant = ScoreVariant::parse(token).unwrap();
            let mut expected = Tensor2D::zeros(5, 4);
            if variant.magnitude {
                expected = expected.add(&mag).unwrap();
            }
            if variant.low_rank {
                expected = expected.add(&ab).unwrap();
            }
            if variant.structured {
                expected = expected.add(&rc).unwrap();
            }
            let got = state.score_variant(variant);
            for (g, e) in got.data().iter().zip(expected.data()) {
                assert!((g - e).abs() < 1e-12, "variant {token} mismatch");
            }
            assert_eq!(variant.label(), token);
        }
    }

    #[test]
    fn variant_parse_rejects_junk() {
        assert!(ScoreVariant::parse("magnitude").is_err());
        assert!(ScoreVariant::parse("").is_err());
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(trainable_param_count(768, 768, 8, 8), 26112);
        assert_eq!(movement_param_count(768, 768), 1179648);
        let ratio = 26112.0_f64 / 1179648.0;
        assert!((ratio - 0.0221).abs() < 5e-4);
        assert_eq!(trainable_param_count(10, 6, 0, 0), 16);
        assert_eq!(trainable_param_count(1024, 1024, 8, 8), 34816);
    }

    #[test]
    fn w0_survives_accumulation_untouched() {
        let mut state = fresh_state(19);
        let w0_before = state.w0().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..3 {
            let grad = Tensor2D::gaussian(5, 4, 1.0, &mut rng);
            let w = state.effective_weight();
            state.accumulate_structured(&grad, &w).unwrap();
        }
        assert_eq!(state.w0(), &w0_before);
    }
}

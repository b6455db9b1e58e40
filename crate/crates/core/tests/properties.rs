mod common;

use common::*;
use proptest::prelude::*;
use recse::eval::{average_ranks, polarity_analysis, spearman_rho};
use recse::objective::{combine, loss_cl, loss_cl_on, loss_re, BatchEmbeddings};
use recse::reshape::{decompose, lift, project, reconstruct, reshape_batch_on, IdScale, ProjectionParams};
use recse::tensor::{SeededRng, Tape, Tensor};
use recse::text::{apply_prompt, build_vocab, detokenize, tokenize, PromptVariant, TokenSequence, PAD};

fn seq_from(ids: &[u32], l_max: usize) -> TokenSequence {
    let mut padded = ids.to_vec();
    padded.resize(l_max, PAD);
    TokenSequence {
        pad_mask: (0..l_max).map(|i| i < ids.len()).collect(),
        ids: padded,
        mask_pos: None,
    }
}

fn sequence() -> impl Strategy<Value = TokenSequence> {
    (4usize..24).prop_flat_map(|l_max| {
        prop::collection::vec(1u32..10_000, 0..=l_max).prop_map(move |ids| seq_from(&ids, l_max))
    })
}

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Tensor::matrix(n, d, v).unwrap())
}

fn batch() -> impl Strategy<Value = BatchEmbeddings> {
    (1usize..6, 2usize..5).prop_flat_map(|(n, d)| {
        (matrix(n, d), matrix(n, d), matrix(n, d))
            .prop_filter("nonzero rows", |(a, b, c)| {
                [a, b, c].iter().all(|m| (0..m.shape()[0]).all(|r| m.row(r).iter().any(|v| v.abs() > 1e-3)))
            })
            .prop_map(|(a, b, c)| BatchEmbeddings::new(a, b, c).unwrap())
    })
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    Tensor::matrix(perm.len(), d, perm.iter().flat_map(|&r| t.row(r).to_vec()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // text

    #[test]
    fn tokenizer_is_total(s in "\\PC{0,80}", l_max in 4usize..40) {
        let vocab = build_vocab(&["the cat sat on the mat"], 1).unwrap();
        let seq = tokenize(&s, &vocab, l_max);
        prop_assert_eq!(seq.ids.len(), l_max);
        prop_assert_eq!(seq.pad_mask.len(), l_max);
        let n = seq.len_real();
        prop_assert!(seq.pad_mask.iter().enumerate().all(|(i, m)| *m == (i < n)));
        prop_assert!(seq.ids[n..].iter().all(|&id| id == PAD));
        prop_assert!(seq.ids.iter().all(|&id| (id as usize) < vocab.len()));
    }

    #[test]
    fn in_vocab_text_round_trips(words in prop::collection::vec(0usize..8, 1..12)) {
        let lexicon = ["alpha", "beta", "gamma", "delta", ",", ".", "[MASK]", "zeta"];
        let corpus = vec![lexicon.join(" ")];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let text: Vec<&str> = words.iter().map(|&i| lexicon[i]).collect();
        let seq = tokenize(&text.join(" "), &vocab, 16);
        let again = tokenize(&detokenize(&seq, &vocab), &vocab, 16);
        prop_assert_eq!(&again, &seq);
    }

    // reshape

    #[test]
    fn lift_is_symmetric_with_id_diagonal(seq in sequence()) {
        let m = lift(&seq, IdScale::Raw);
        let n = seq.l_max();
        for i in 0..n {
            prop_assert_eq!(m.get(i, i), if seq.pad_mask[i] { seq.ids[i] as f64 } else { 0.0 });
            for j in 0..n {
                prop_assert_eq!(m.get(i, j).to_bits(), m.get(j, i).to_bits());
            }
        }
        let (d, off) = decompose(&m).unwrap();
        let back = reconstruct(&d, &off).unwrap();
        prop_assert_eq!(back.data(), m.x.data());
    }

    #[test]
    fn lift_commutes_with_permutation(ids in prop::collection::vec(1u32..5000, 1..12), seed in any::<u64>()) {
        let l_max = 12;
        let mut perm: Vec<usize> = (0..ids.len()).collect();
        SeededRng::new(seed).shuffle(&mut perm);
        let permuted: Vec<u32> = perm.iter().map(|&p| ids[p]).collect();
        let a = lift(&seq_from(&ids, l_max), IdScale::Raw);
        let b = lift(&seq_from(&permuted, l_max), IdScale::Raw);
        for i in 0..ids.len() {
            for j in 0..ids.len() {
                prop_assert_eq!(b.get(i, j), a.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn lift_scales_linearly(ids in prop::collection::vec(1u32..1000, 1..10), c in 1u32..50) {
        let scaled: Vec<u32> = ids.iter().map(|&i| i * c).collect();
        let a = lift(&seq_from(&ids, 10), IdScale::Raw);
        let b = lift(&seq_from(&scaled, 10), IdScale::Raw);
        for (x, y) in a.x.data().iter().zip(b.x.data()) {
            prop_assert!((y - c as f64 * x).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn projection_weights_receive_gradient(ids in prop::collection::vec(1u32..500, 2..8), seed in any::<u64>()) {
        let seq = seq_from(&ids, 8);
        let params = ProjectionParams::init(8, &SeededRng::new(seed));
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = reshape_batch_on(&tape, &[&seq], &bound, IdScale::Normalized { vocab_size: 500 }).unwrap();
        let w = tape.constant(Tensor::matrix(1, 8, (0..8).map(|i| 1.0 + i as f64).collect()).unwrap());
        let loss = tape.sum(&tape.mul(&x, &w).unwrap());
        tape.backward(&loss).unwrap();
        let mut p = params.clone();
        p.absorb(&bound, 1.0);
        prop_assert!(p.params()[0].grad().unwrap().iter().any(|g| *g != 0.0));
        let value = project(&lift(&seq, IdScale::Normalized { vocab_size: 500 }), &params).unwrap();
        prop_assert_eq!(value.data(), x.data());
    }

    // objective

    #[test]
    fn losses_are_non_negative(b in batch(), tau in 0.01f64..2.0) {
        prop_assert!(loss_cl(&b, tau).unwrap() >= -1e-12);
        prop_assert!(loss_re(&b, tau).unwrap() >= -1e-12);
    }

    #[test]
    fn losses_ignore_batch_order(b in batch(), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..b.len()).collect();
        SeededRng::new(seed).shuffle(&mut perm);
        let p = BatchEmbeddings::new(permute_rows(&b.h_z, &perm), permute_rows(&b.h_zp, &perm), permute_rows(&b.h_star, &perm)).unwrap();
        prop_assert!((loss_cl(&b, 0.05).unwrap() - loss_cl(&p, 0.05).unwrap()).abs() <= 1e-12);
        prop_assert!((loss_re(&b, 0.05).unwrap() - loss_re(&p, 0.05).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn uniform_point_is_temperature_free(n in 1usize..9, tau in 0.01f64..5.0, row in prop::collection::vec(0.1f64..2.0, 3)) {
        let t = Tensor::matrix(n, 3, row.iter().copied().cycle().take(3 * n).collect()).unwrap();
        let b = BatchEmbeddings::new(t.clone(), t.clone(), t).unwrap();
        prop_assert!((loss_cl(&b, tau).unwrap() - (n as f64).ln()).abs() <= 1e-10);
    }

    #[test]
    fn gradient_step_lowers_loss_cl(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let mut draw = || Tensor::matrix(4, 5, (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let (hz, hzp) = (draw(), draw());
        let tape = Tape::new();
        let a = tape.leaf(hz.clone());
        let l = loss_cl_on(&tape, &a, &tape.constant(hzp.clone()), 0.05).unwrap();
        tape.backward(&l).unwrap();
        let g = a.grad_or_zeros();
        prop_assume!(g.iter().any(|v| v.abs() > 1e-9));
        let mut moved = hz.clone();
        for (v, g) in moved.data_mut().iter_mut().zip(&g) {
            *v -= 1e-3 * g;
        }
        let before = loss_cl(&BatchEmbeddings::new(hz, hzp.clone(), hzp.clone()).unwrap(), 0.05).unwrap();
        let after = loss_cl(&BatchEmbeddings::new(moved, hzp.clone(), hzp).unwrap(), 0.05).unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn combine_is_affine_plus_max(l_cl in 0.0f64..10.0, l_re in 0.0f64..10.0, lambda in 0.0f64..=1.0) {
        let (c, gate) = combine(l_cl, l_re, lambda);
        prop_assert_eq!(c, lambda * l_cl + (1.0 - lambda) * l_cl.max(l_re));
        prop_assert_eq!(gate, l_re > l_cl);
        prop_assert!(c >= l_cl - 1e-12);
    }

    // eval

    #[test]
    fn spearman_ignores_monotone_transforms(v in prop::collection::hash_set(-1000i32..1000, 2..30), seed in any::<u64>()) {
        let x: Vec<f64> = v.into_iter().map(f64::from).collect();
        let mut rng = SeededRng::new(seed);
        let y: Vec<f64> = x.iter().map(|_| rng.next_f64()).collect();
        prop_assume!(y.iter().any(|v| *v != y[0]));
        let rho = spearman_rho(&x, &y).unwrap();
        let warped: Vec<f64> = x.iter().map(|v| (v / 100.0).exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(spearman_rho(&warped, &y).unwrap(), rho);
        let cubed: Vec<f64> = y.iter().map(|v| v * v * v).collect();
        prop_assert_eq!(spearman_rho(&x, &cubed).unwrap(), rho);
        prop_assert_eq!(spearman_rho(&x, &x).unwrap(), 1.0);
        let reversed: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert_eq!(spearman_rho(&x, &reversed).unwrap(), -1.0);
        prop_assert!((-1.0..=1.0).contains(&rho));
    }

    #[test]
    fn ranks_match_pairwise_oracle(v in prop::collection::vec(0u8..5, 1..40)) {
        let x: Vec<f64> = v.into_iter().map(f64::from).collect();
        prop_assert_eq!(average_ranks(&x), brute_ranks(&x));
    }

    #[test]
    fn polarity_conserves_counts(scores in prop::collection::vec(0.0f64..=1.0, 1..500), k in 1usize..6) {
        let r = polarity_analysis(&scores, 3 * k).unwrap();
        prop_assert_eq!(r.histogram.iter().sum::<usize>(), scores.len());
        prop_assert_eq!(r.n_pairs, scores.len());
        prop_assert!((-1.0..=0.5).contains(&r.polarity_index));
    }
}

#[test]
fn prompts_match_golden_file() {
    let golden = include_str!("golden/prompts.txt");
    let lines: Vec<&str> = golden.lines().collect();
    for chunk in lines.chunks(3) {
        assert_eq!(apply_prompt(chunk[0], PromptVariant::A).unwrap().as_bytes(), chunk[1].as_bytes());
        assert_eq!(apply_prompt(chunk[0], PromptVariant::B).unwrap().as_bytes(), chunk[2].as_bytes());
    }
}

#[test]
fn spearman_on_small_permutations_matches_oracle() {
    for n in 2..=6 {
        let gold: Vec<f64> = (0..n).map(|i| i as f64).collect();
        for p in permutations(n) {
            let est: Vec<f64> = p.iter().map(|&i| i as f64).collect();
            let rho = spearman_rho(&est, &gold).unwrap();
            assert!((rho - brute_spearman(&est, &gold)).abs() <= 1e-12);
            assert!((rho - brute_spearman_d2(&est, &gold)).abs() <= 1e-12);
        }
    }
}

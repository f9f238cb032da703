use proptest::prelude::*;

use super::*;

fn noiseless() -> CorpusConfig {
    CorpusConfig { noise_sigma: 0.0, ..Default::default() }
}

#[test]
fn align_rates_examples() {
    assert_eq!(align_rates(10, 10).unwrap(), (0..10).collect::<Vec<_>>());
    assert_eq!(align_rates(4, 8).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
    assert_eq!(align_rates(8, 4).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
    assert_eq!(align_rates(3, 5).unwrap(), vec![0, 1, 1, 2, 2]);
    assert!(matches!(align_rates(0, 5), Err(DataError::Argument(_))));
    assert!(matches!(align_rates(5, 0), Err(DataError::Argument(_))));
}

#[test]
fn align_rates_is_nearest_neighbour() {
    // within half a step of the exact position, except where clamped to the last index
    for long in 1..40usize {
        for short in 1..=long {
            let map = align_rates(short, long).unwrap();
            for (i, &j) in map.iter().enumerate() {
                let exact = i as f64 * short as f64 / long as f64;
                let near = (j as f64 - exact).abs() <= 0.5 + 1e-12;
                assert!(near || (j == short - 1 && exact > j as f64), "({short},{long}) i={i} j={j}");
            }
        }
    }
}

#[test]
fn noiseless_lips_equal_prototypes() {
    let cfg = noiseless();
    let synth = Synthesizer::new(&cfg).unwrap();
    let u = synth.utterance(42, "u");
    for (t, &p) in u.gt_expansion.ids.iter().enumerate() {
        assert_eq!(u.lips.frame(t), synth.prototype(p));
    }
    let norm: f32 = synth.prototype(0).iter().map(|x| x * x).sum();
    assert!((norm - 1.0).abs() < 1e-5);
}

#[test]
fn same_seed_same_utterance() {
    let cfg = CorpusConfig::default();
    let a = gen_utterance(7, &cfg).unwrap();
    let b = gen_utterance(7, &cfg).unwrap();
    assert_eq!(a, b);
    let bits = |u: &Utterance| u.lips.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(a, gen_utterance(8, &cfg).unwrap());
}

#[test]
fn expansion_by_repetition() {
    let p = PhonemeSeq::new(vec![5, 9], 24).unwrap();
    let g = GroundTruthExpansion::from_durations(&p, &[2, 3]).unwrap();
    assert_eq!(g.ids, vec![5, 5, 9, 9, 9]);
    assert_eq!(g.positions, vec![0, 0, 1, 1, 1]);
    assert!(g.is_monotone_expansion_of(&p));
    assert!(GroundTruthExpansion::from_durations(&p, &[2, 0]).is_err());
}

#[test]
fn codec_direct_formula() {
    let codec = Codec::new(&CorpusConfig::default());
    assert_eq!(codec.encode(3, 1, 0).unwrap(), 13);
    assert_ne!(codec.encode(3, 0, 0).unwrap(), codec.encode(3, 2, 0).unwrap());
    assert_eq!(codec.encode(3, 0, 1).unwrap(), codec.encode(3, 2, 1).unwrap());
    assert!(matches!(codec.encode(3, 0, 4), Err(DataError::Argument(_))));
    assert!(codec.multipliers()[1..].iter().all(|&k| k % 2 == 1));
}

#[test]
fn codec_level0_inverts_exactly_when_large_enough() {
    let cfg = CorpusConfig { vocab_p: 16, n_speakers: 4, codebook_size: 64, ..Default::default() };
    let codec = Codec::new(&cfg);
    assert!(codec.level0_injective());
    for p in 0..16 {
        for s in 0..4 {
            let tok = codec.encode(p, s, 0).unwrap();
            assert_eq!(codec.invert_level0(tok), vec![(p, s)]);
        }
    }
    // the default toy scale is too small for injectivity, but the speaker stays recoverable
    let codec = Codec::new(&CorpusConfig::default());
    assert!(!codec.level0_injective());
    for p in 0..24 {
        for s in 0..4 {
            assert_eq!(codec.encode(p, s, 0).unwrap() as usize % 4, s);
        }
    }
}

#[test]
fn upper_levels_are_injective_over_phonemes() {
    let cfg = CorpusConfig::default();
    let codec = Codec::new(&cfg);
    for level in 1..cfg.n_q {
        let mut toks: Vec<u32> = (0..cfg.vocab_p).map(|p| codec.encode(p, 0, level).unwrap()).collect();
        toks.sort_unstable();
        toks.dedup();
        assert_eq!(toks.len(), cfg.vocab_p);
    }
}

#[test]
fn decode_sums_table_rows() {
    let cfg = CorpusConfig::default();
    let dec = FeatureDecoder::new(&cfg);
    let frames = vec![vec![1, 2, 3, 4], vec![60, 0, 63, 7]];
    let grid = TokenGrid::from_frames(4, 64, &frames).unwrap();
    let feats = dec.decode(&grid).unwrap();
    assert_eq!(feats.shape(), &[2, cfg.feature_dim]);
    for (t, frame) in frames.iter().enumerate() {
        for c in 0..cfg.feature_dim {
            let hand: f64 = frame.iter().enumerate().map(|(l, &tok)| dec.row(l, tok)[c]).sum();
            assert_eq!(feats.at(t, c), hand);
        }
    }
}

#[test]
fn decode_is_local_and_deterministic() {
    let cfg = CorpusConfig::default();
    let dec = FeatureDecoder::new(&cfg);
    let u = gen_utterance(3, &cfg).unwrap();
    let base = dec.decode(&u.target).unwrap();
    assert_eq!(base, FeatureDecoder::new(&cfg).decode(&u.target).unwrap());

    let mut frames = u.target.to_frames();
    let hit = frames.len() / 2;
    frames[hit][2] = (frames[hit][2] + 1) % 64;
    let changed = dec.decode(&TokenGrid::from_frames(4, 64, &frames).unwrap()).unwrap();
    for t in 0..frames.len() {
        let same = base.row(t) == changed.row(t);
        assert_eq!(same, t != hit, "frame {t}");
    }
}

#[test]
fn reference_comes_from_same_speaker() {
    let cfg = CorpusConfig::default();
    let synth = Synthesizer::new(&cfg).unwrap();
    for u in synth.corpus(5, 20) {
        assert_eq!(u.reference.frames(), cfg.ref_frames);
        assert!(u.reference.level(0).iter().all(|&t| t as usize % cfg.n_speakers == u.speaker));
    }
}

#[test]
fn noiseless_corpus_is_perfectly_classifiable() {
    let cfg = noiseless();
    let synth = Synthesizer::new(&cfg).unwrap();
    let (mut hits, mut total) = (0, 0);
    for u in synth.corpus(11, 50) {
        for t in 0..u.video_frames() {
            hits += usize::from(synth.nearest_prototype(u.lips.frame(t)) == u.gt_expansion.ids[t]);
            total += 1;
        }
    }
    assert_eq!(hits, total);
}

#[test]
fn jsonl_round_trip() {
    let cfg = CorpusConfig::default();
    let corpus = generate_corpus(9, 6, &cfg).unwrap();
    let header = CorpusHeader::new(cfg, 9, corpus.len());
    let mut buf = Vec::new();
    write_corpus(&mut buf, &header, &corpus).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 7);
    let (h2, back) = read_corpus(buf.as_slice()).unwrap();
    assert_eq!(h2, header);
    assert_eq!(back, corpus);
}

#[test]
fn jsonl_rejects_tampering() {
    let cfg = CorpusConfig::default();
    let corpus = generate_corpus(9, 2, &cfg).unwrap();
    let mut buf = Vec::new();
    write_corpus(&mut buf, &CorpusHeader::new(cfg.clone(), 9, 2), &corpus).unwrap();
    let text = String::from_utf8(buf).unwrap();

    let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
    assert!(matches!(read_corpus(truncated.as_bytes()), Err(DataError::Format(_))));

    let bad_version = text.replacen("\"version\":1", "\"version\":99", 1);
    assert!(matches!(read_corpus(bad_version.as_bytes()), Err(DataError::Format(_))));

    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    rec["durations"][0] = serde_json::json!(rec["durations"][0].as_u64().unwrap() + 1);
    lines[1] = rec.to_string();
    assert!(read_corpus(lines.join("\n").as_bytes()).is_err());
}

#[test]
fn split_keeps_order() {
    let corpus = generate_corpus(1, 5, &CorpusConfig::default()).unwrap();
    let ids: Vec<_> = corpus.iter().map(|u| u.id.clone()).collect();
    let (train, held) = split_corpus(corpus, 2).unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(held[0].id, ids[3]);
    assert!(split_corpus(train, 4).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        CorpusConfig { vocab_p: 1, ..Default::default() },
        CorpusConfig { n_speakers: 0, ..Default::default() },
        CorpusConfig { min_duration: 0, ..Default::default() },
        CorpusConfig { noise_sigma: -0.1, ..Default::default() },
        CorpusConfig { vocab_p: 65, ..Default::default() },
    ];
    for cfg in bad {
        assert!(matches!(Synthesizer::new(&cfg), Err(DataError::Config(_))), "{cfg:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_utterances_satisfy_invariants(seed in any::<u64>(), sigma in 0.0f64..0.5) {
        let cfg = CorpusConfig { noise_sigma: sigma, ..Default::default() };
        let u = gen_utterance(seed, &cfg).unwrap();
        let t_v: usize = u.durations.iter().sum();
        prop_assert_eq!(u.gt_expansion.len(), t_v);
        prop_assert_eq!(u.lips.frames, t_v);
        prop_assert_eq!(u.target.frames(), t_v);
        prop_assert!(t_v >= u.phonemes.len());
        prop_assert!(u.gt_expansion.is_monotone_expansion_of(&u.phonemes));
        prop_assert!(u.target.tokens().iter().all(|&t| (t as usize) < cfg.codebook_size));
        prop_assert!(corpus::check_utterance(&u, &cfg).is_ok());
    }

    #[test]
    fn align_rates_is_monotone_and_surjective(a in 1usize..200, b in 1usize..200) {
        let map = align_rates(a, b).unwrap();
        prop_assert_eq!(map.len(), a.max(b));
        prop_assert!(map.windows(2).all(|w| w[0] <= w[1] && w[1] - w[0] <= 1));
        prop_assert_eq!(map[0], 0);
        prop_assert_eq!(*map.last().unwrap(), a.min(b) - 1);
    }

    #[test]
    fn level0_is_injective_under_size_precondition(vocab_p in 2usize..12, spk in 1usize..5) {
        let cfg = CorpusConfig { vocab_p, n_speakers: spk, codebook_size: 64, ..Default::default() };
        let codec = Codec::new(&cfg);
        let mut seen = std::collections::HashSet::new();
        for p in 0..vocab_p {
            for s in 0..spk {
                prop_assert!(seen.insert(codec.encode(p, s, 0).unwrap()));
            }
        }
    }
}

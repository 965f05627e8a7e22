mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sead_core::data::gen_synthetic;
use sead_core::eg::{agg_drop_transform, eg_candidates, eg_decode, select_candidate, EgMode, EgPolicy};
use sead_core::executor::execute;
use sead_core::model::{beam_search, ModelConfig, Seq2Seq};
use sead_core::model::train::inference_source;
use sead_core::sql::{parse_sql, render_query};
use sead_core::vocab::Vocabulary;

fn passes(tokens: &[String], table: &sead_core::data::Table, agg_drop: bool) -> bool {
    let Ok(q) = parse_sql(tokens, &table.schema()) else { return false };
    let check = if agg_drop { agg_drop_transform(&q) } else { q };
    execute(&check, table).map(|rs| !rs.is_empty()).unwrap_or(false)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn selection_returns_first_executable_candidate(seed in any::<u64>(), agg_drop in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = common::random_table(&mut rng, 20);
        let schema = table.schema();
        let cands: Vec<Vec<String>> = (0..rng.random_range(1..6))
            .map(|_| {
                let mut t = render_query(&common::random_exec_query(&mut rng, &table));
                if rng.random_bool(0.15) {
                    t.truncate(t.len() / 2);
                }
                t
            })
            .collect();
        let first_ok = cands.iter().position(|c| passes(c, &table, agg_drop));
        let first_parse = cands.iter().position(|c| parse_sql(c, &schema).is_ok());
        match select_candidate(&cands, &schema, &table, agg_drop) {
            Ok(out) => {
                prop_assert_eq!(out.query.clone(), parse_sql(&cands[out.rank], &schema).unwrap());
                if out.degraded {
                    prop_assert!(first_ok.is_none());
                    prop_assert_eq!(Some(out.rank), first_parse);
                } else {
                    prop_assert_eq!(Some(out.rank), first_ok);
                }
            }
            Err(_) => prop_assert!(first_parse.is_none()),
        }
    }
}

#[test]
fn width_one_without_release_is_greedy() {
    let (tables, corpus) = gen_synthetic(4, 3, 12);
    let vocab = Vocabulary::build(&corpus, &tables, 1).unwrap();
    let cfg = ModelConfig { layers: 1, hidden: 16, heads: 2, ff: 32, dropout: 0.0, ..Default::default() };
    let m = Seq2Seq::new(cfg, vocab).unwrap();
    let policy = EgPolicy { max_len: 24, ..EgPolicy::for_mode(EgMode::Off, 1) };
    for r in &corpus.records {
        let src = inference_source(r, &tables).unwrap();
        let greedy = beam_search(&m, &src, 1, 24).unwrap().remove(0).tokens;
        assert_eq!(eg_candidates(&m, &src, &policy).unwrap()[0], greedy);
        let table = tables.get(&r.table_id).unwrap();
        if let Ok(out) = eg_decode(&m, &src, &table.schema(), table, &policy) {
            assert_eq!(out.candidates, 1);
        }
    }
}

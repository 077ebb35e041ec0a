//! End-to-end oracles on generated suites.

mod common;

use catmerge::merging::{merge, MergeConfig, MergeMethod};
use catmerge::netexec::LossKind;
use catmerge::synthbench::{evaluate, generate_suite, SuiteConfig, TaskSuite};
use catmerge::tensorio::check_aligned;

fn suite(seed: u64, tasks: usize, conflict_strength: f64) -> TaskSuite {
    generate_suite(&SuiteConfig { seed, tasks, conflict_strength, ..SuiteConfig::default() }).unwrap()
}

fn merged(s: &TaskSuite, method: MergeMethod) -> catmerge::Checkpoint {
    let cfg = MergeConfig { method, ..MergeConfig::default() };
    merge(s.spec(), &s.pretrained, &s.finetuned(), &s.exemplars(3).unwrap(), &cfg).unwrap().merged
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn orthogonal_tasks_are_learned_by_their_finetuned_models() {
    for seed in 0..3 {
        let s = suite(seed, 4, 0.0);
        for (k, t) in s.tasks.iter().enumerate() {
            let acc = evaluate(s.spec(), &t.finetuned, &t.eval, LossKind::CrossEntropy).unwrap().accuracy;
            assert!(acc >= 0.9, "seed {seed} task {k}: accuracy {acc}");
        }
    }
}

#[test]
fn full_overlap_makes_task_arithmetic_fall_below_individual_models() {
    let mut below = 0;
    for seed in 0..10 {
        let s = suite(seed, 4, 1.0);
        let individual = mean(
            s.tasks.iter().map(|t| evaluate(s.spec(), &t.finetuned, &t.eval, LossKind::CrossEntropy).unwrap().accuracy),
        );
        let ta = mean(s.evaluate_all(&merged(&s, MergeMethod::TaskArithmetic)).unwrap().iter().map(|m| m.accuracy));
        below += usize::from(ta < individual);
    }
    assert!(below >= 8, "task arithmetic below individual models on {below}/10 seeds");
}

#[test]
fn cat_lowers_summed_task_loss_on_two_task_suites() {
    let mut wins = 0;
    for seed in 0..10 {
        let s = suite(seed, 2, 0.8);
        let loss = |m: MergeMethod| s.evaluate_all(&merged(&s, m)).unwrap().iter().map(|x| x.loss).sum::<f64>();
        wins += usize::from(loss(MergeMethod::Cat) <= loss(MergeMethod::TaskArithmetic));
    }
    assert!(wins >= 8, "CAT summed loss ≤ TA on {wins}/10 seeds");
}

#[test]
fn checkpoints_are_aligned_and_saved_files_are_reproducible() {
    let cfg = SuiteConfig { seed: 21, tasks: 2, train_samples: 64, eval_samples: 32, pretrain_steps: 40, finetune_steps: 40, ..SuiteConfig::default() };
    let a = generate_suite(&cfg).unwrap();
    for t in &a.tasks {
        assert!(check_aligned(&a.pretrained, &t.finetuned));
    }
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    a.save(dirs[0].path()).unwrap();
    generate_suite(&cfg).unwrap().save(dirs[1].path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 2 + 2 * 4);
    for name in names {
        let x = std::fs::read(dirs[0].path().join(&name)).unwrap();
        let y = std::fs::read(dirs[1].path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?} differs");
    }
}

#[test]
fn exemplar_pool_size_does_not_change_anything_else() {
    let base = SuiteConfig { seed: 4, tasks: 2, train_samples: 64, eval_samples: 32, pretrain_steps: 30, finetune_steps: 30, ..SuiteConfig::default() };
    let a = generate_suite(&base).unwrap();
    let b = generate_suite(&SuiteConfig { exemplars: 8, ..base }).unwrap();
    assert!(a.pretrained.bit_eq(&b.pretrained));
    for (x, y) in a.tasks.iter().zip(&b.tasks) {
        assert!(x.finetuned.bit_eq(&y.finetuned));
        assert_eq!(x.eval, y.eval);
        assert_eq!(x.exemplars, y.exemplars.head(3).unwrap());
    }
}

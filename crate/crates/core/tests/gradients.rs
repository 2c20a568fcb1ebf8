mod common;

use common::{gradient_case, GRADIENT_CASES};
use ddfnet::param::Module;

fn run(name: &str) -> common::FdResult {
    let (r, tol) = gradient_case(name);
    println!("{name}: {} entries, max rel err {:.3e} at {}", r.checked, r.max_rel, r.worst);
    assert!(r.checked > 0);
    assert!(r.max_rel <= tol, "{name}: max rel err {:.3e} > {tol:e}", r.max_rel);
    r
}

#[test]
fn sae_gradients() {
    run("SAE");
}

#[test]
fn cae_gradients() {
    run("CAE");
}

#[test]
fn sfu_gradients() {
    run("SFU");
}

#[test]
fn router_gradients() {
    run("router");
}

#[test]
fn scfu_gradients() {
    run("SCFU");
}

#[test]
fn branch_gradients() {
    run("branch");
}

#[test]
fn afm_gradients() {
    run("AFM");
}

#[test]
fn efm_gradients() {
    run("EFM");
}

#[test]
fn full_model_gradients() {
    let r = run("full model");
    // Sampled entries cover every parameter tensor.
    assert!(r.checked > 3 * common::tiny_model().named_params().len());
}

#[test]
fn case_list_is_complete() {
    assert_eq!(GRADIENT_CASES.len(), 9);
}

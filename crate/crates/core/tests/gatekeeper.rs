mod common;

use std::collections::BTreeSet;

use common::*;
use station_core::functions::{ParamValue, Params};
use station_core::gatekeeper::InvocationStatus;
use station_core::model::{ReleaseDecision, Role, StoredMode, TrustMode};
use station_core::registry::ReleaseOutcome;
use station_core::station::Station;

fn boot(mode: TrustMode) -> (tempfile::TempDir, Station) {
    let dir = tempfile::tempdir().unwrap();
    let st = Station::open(config(dir.path(), mode)).unwrap();
    (dir, st)
}

#[test]
fn download_returns_the_original_upload_in_both_modes() {
    for mode in [TrustMode::FullTrust, TrustMode::NearZeroTrust] {
        let (_d, st) = boot(mode);
        let owner = register(&st, "o", &[Role::Owner]);
        let user = register(&st, "u", &[Role::User]);
        let data: Vec<u8> = (0..10_240).map(|i| (i * 7 % 251) as u8).collect();
        let de = upload(&st, &owner, &data, StoredMode::Sealed);

        let r = st.invoke(user.id, &f("download"), Params::new(), Some(vec![de])).unwrap();
        assert!(matches!(r.status, InvocationStatus::Denied { .. }), "{mode:?}");

        st.create_policy(owner.id, user.id, f("download"), de).unwrap();
        let r = st.invoke(user.id, &f("download"), Params::new(), Some(vec![de])).unwrap();
        assert_eq!(r.status, InvocationStatus::Delivered);
        assert_eq!(r.deliveries.len(), 1);
        assert_eq!(r.deliveries[0].encrypted, mode.encrypts());
        assert_eq!(open_payload(&st, &user, &r.deliveries[0].payload), data);
    }
}

#[test]
fn policy_on_search_also_authorizes_index() {
    let (_d, st) = boot(TrustMode::FullTrust);
    let owner = register(&st, "o", &[Role::Owner]);
    let user = register(&st, "u", &[Role::User]);
    let a = upload(&st, &owner, b"alpha beta", StoredMode::Sealed);
    let b = upload(&st, &owner, b"beta gamma", StoredMode::Sealed);
    for de in [a, b] {
        st.create_policy(owner.id, user.id, f("search"), de).unwrap();
    }
    let idx = st.invoke(user.id, &f("index"), Params::new(), None).unwrap();
    assert_eq!(idx.status, InvocationStatus::Delivered);
    let index_de = idx.deliveries[0].de.unwrap();

    let mut p = Params::new();
    p.insert("query".into(), ParamValue::String("beta".into()));
    p.insert("index".into(), ParamValue::Int(index_de.0 as i64));
    let r = st.invoke(user.id, &f("search"), p, None).unwrap();
    assert_eq!(r.status, InvocationStatus::Delivered);
    let hits = String::from_utf8(r.deliveries[0].payload.clone()).unwrap();
    assert_eq!(hits, format!("de-{}\nde-{}\n", a.0, b.0));

    let prov = st.provenance_of(index_de).unwrap();
    assert_eq!(prov.des, BTreeSet::from([a, b]));
    assert!(st.provenance_of(a).unwrap().records.is_empty());
}

#[test]
fn enclave_results_are_staged_until_every_owner_grants() {
    let (_d, st) = boot(TrustMode::NearZeroTrust);
    let o1 = register(&st, "o1", &[Role::Owner]);
    let o2 = register(&st, "o2", &[Role::Owner]);
    let user = register(&st, "u", &[Role::User]);
    upload(&st, &o1, b"1,2\n3,4\n", StoredMode::Enclave);
    upload(&st, &o2, b"5,6\n", StoredMode::Enclave);

    let r = st.invoke(user.id, &f("train_pooled_csv"), Params::new(), None).unwrap();
    assert_eq!(r.status, InvocationStatus::Staged);
    assert!(r.deliveries.is_empty());
    let staged = r.staged[0];
    assert_eq!(st.pending_approvals(o1.id).len(), 1);
    assert!(st.approve_release(user.id, staged, ReleaseDecision::Grant).is_err());

    let policies = st.registry().policy_count();
    assert!(matches!(
        st.approve_release(o1.id, staged, ReleaseDecision::Grant).unwrap(),
        ReleaseOutcome::Pending(_)
    ));
    assert_eq!(st.approve_release(o2.id, staged, ReleaseDecision::Grant).unwrap(), ReleaseOutcome::Released);
    assert_eq!(st.registry().policy_count(), policies + 2);
    let got = st.fetch_released(user.id, staged).unwrap();
    assert_eq!(open_payload(&st, &user, &got.payload), b"rows=3\nmeans=3.000000,4.000000\n");
    assert!(st.fetch_released(user.id, staged).is_err());

    let covered = st.invoke_covered_only(user.id, &f("train_pooled_csv"), Params::new()).unwrap();
    assert_eq!(covered.status, InvocationStatus::Delivered);
}

#[test]
fn a_denial_removes_the_staged_result_and_adds_no_policy() {
    let (_d, st) = boot(TrustMode::FullTrust);
    let o1 = register(&st, "o1", &[Role::Owner]);
    let user = register(&st, "u", &[Role::User]);
    upload(&st, &o1, b"1,2\n", StoredMode::Enclave);
    let r = st.invoke(user.id, &f("train_pooled_csv"), Params::new(), None).unwrap();
    let staged = r.staged[0];
    let policies = st.registry().policy_count();
    assert_eq!(st.approve_release(o1.id, staged, ReleaseDecision::Deny).unwrap(), ReleaseOutcome::Removed);
    assert_eq!(st.registry().policy_count(), policies);
    assert!(st.registry().de(staged).is_err());
    assert!(st.pending_deliveries(user.id).is_empty());
}

#[test]
fn covered_only_ignores_enclave_data_and_never_stages() {
    let (_d, st) = boot(TrustMode::FullTrust);
    let owner = register(&st, "o", &[Role::Owner]);
    let user = register(&st, "u", &[Role::User]);
    let a = upload(&st, &owner, b"one", StoredMode::Sealed);
    upload(&st, &owner, b"two", StoredMode::Enclave);
    st.create_policy(owner.id, user.id, f("concat"), a).unwrap();
    let r = st.invoke_covered_only(user.id, &f("concat"), Params::new()).unwrap();
    assert_eq!(r.deliveries[0].payload, b"one");
    assert!(st.registry().state().staged.is_empty());

    let r = st.invoke(user.id, &f("concat"), Params::new(), None).unwrap();
    assert_eq!(r.status, InvocationStatus::Staged);
}

#[test]
fn zero_accessible_des_runs_over_an_empty_view() {
    let (_d, st) = boot(TrustMode::FullTrust);
    let user = register(&st, "u", &[Role::User]);
    let r = st.invoke(user.id, &f("concat"), Params::new(), None).unwrap();
    assert_eq!(r.status, InvocationStatus::Delivered);
    assert!(r.deliveries[0].payload.is_empty());
}

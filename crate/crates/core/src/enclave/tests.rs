use super::*;
use crate::crypto::{kx::public_key, shamir_reconstruct};
use crate::field::add_vec;
use rand::rngs::OsRng;
use tempfile::TempDir;

struct Cohort {
    _tmp: TempDir,
    enclaves: Vec<Enclave>,
}

fn ids(n: usize) -> Vec<DeviceId> {
    // Deliberately not in creation order, so canonical order matters.
    (0..n as u64)
        .map(|i| DeviceId(0x1000 + ((i * 7) % n as u64) * 16 + i))
        .collect()
}

fn provision(n: usize, backend: Backend) -> Cohort {
    let tmp = tempfile::tempdir().unwrap();
    let ca = RootCa::generate(&mut OsRng);
    let enclaves = ids(n)
        .into_iter()
        .map(|id| Enclave::provision(tmp.path().join(id.to_string()), id, &ca, backend, &mut OsRng).unwrap())
        .collect();
    Cohort { _tmp: tmp, enclaves }
}

/// Runs KEYGEN / COMPUTE_SEEDS / SEAL on every device and returns, per
/// device, the wrapped shares it received keyed by dealer.
fn establish(c: &mut Cohort, t: usize) -> Vec<BTreeMap<DeviceId, EncryptedShare>> {
    let announces: Vec<(DeviceId, SignedAnnounce)> = c
        .enclaves
        .iter_mut()
        .map(|e| (e.device(), e.cmd_keygen().unwrap()))
        .collect();
    for e in c.enclaves.iter_mut() {
        let report = e.cmd_compute_seeds(&announces).unwrap();
        assert_eq!(report.verified, announces.len() - 1);
    }
    let mut inbox = vec![BTreeMap::new(); c.enclaves.len()];
    let index: BTreeMap<DeviceId, usize> = c.enclaves.iter().enumerate().map(|(i, e)| (e.device(), i)).collect();
    for e in c.enclaves.iter_mut() {
        let dealer = e.device();
        for (to, es) in e.cmd_seal(t).unwrap() {
            inbox[index[&to]].insert(dealer, es);
        }
    }
    inbox
}

#[test]
fn keygen_happy_path_and_guard() {
    let mut c = provision(2, Backend::Trusted);
    let e = &mut c.enclaves[0];
    assert_eq!(e.phase(), Phase::Empty);
    let ann = e.cmd_keygen().unwrap();
    assert_eq!(ann.pk.len(), 32);
    assert_eq!(e.phase(), Phase::KeyHeld);
    assert!(matches!(e.cmd_keygen(), Err(EnclaveError::State { .. })));
}

#[test]
fn compute_seeds_filters_bad_signatures() {
    let mut c = provision(20, Backend::Trusted);
    let mut announces: Vec<(DeviceId, SignedAnnounce)> = c
        .enclaves
        .iter_mut()
        .map(|e| (e.device(), e.cmd_keygen().unwrap()))
        .collect();
    let report = c.enclaves[0].cmd_compute_seeds(&announces).unwrap();
    assert_eq!(
        report,
        SeedReport {
            verified: 19,
            rejected: vec![]
        }
    );

    announces[5].1.signature[0] ^= 1;
    let bad = announces[5].0;
    let report = c.enclaves[1].cmd_compute_seeds(&announces).unwrap();
    assert_eq!(report.verified, 18);
    assert_eq!(report.rejected, vec![bad]);
    let shares = c.enclaves[1].cmd_seal(13).unwrap();
    assert_eq!(shares.len(), 18);
    assert!(shares.iter().all(|(id, _)| *id != bad));
}

#[test]
fn compute_seeds_rejects_foreign_ca_and_empty_sets() {
    let mut c = provision(2, Backend::Trusted);
    let mut other = provision(1, Backend::Trusted);
    let foreign = other.enclaves[0].cmd_keygen().unwrap();
    let foreign_id = other.enclaves[0].device();
    c.enclaves[0].cmd_keygen().unwrap();
    assert!(matches!(
        c.enclaves[0].cmd_compute_seeds(&[(foreign_id, foreign)]),
        Err(EnclaveError::EstablishmentFailed)
    ));
    assert!(matches!(
        c.enclaves[0].cmd_compute_seeds(&[]),
        Err(EnclaveError::EstablishmentFailed)
    ));
    // Still in KeyHeld: a failed COMPUTE_SEEDS does not advance the phase.
    assert_eq!(c.enclaves[0].phase(), Phase::KeyHeld);
}

#[test]
fn seal_shapes_and_footprint() {
    for (n, expected) in [(20usize, 628u64), (50, 1588)] {
        let mut c = provision(n, Backend::Trusted);
        let inbox = establish(&mut c, 13);
        for (e, received) in c.enclaves.iter().zip(&inbox) {
            assert_eq!(received.len(), n - 1);
            assert!(received.values().all(|es| es.to_bytes().len() == 60));
            assert_eq!(e.persistent_footprint().unwrap(), expected);
            assert_eq!(footprint_formula(n) as u64, expected);
            assert_eq!(e.phase(), Phase::Sealed);
        }
    }
}

#[test]
fn seal_parameter_errors_keep_phase() {
    let mut c = provision(3, Backend::Trusted);
    let announces: Vec<_> = c
        .enclaves
        .iter_mut()
        .map(|e| (e.device(), e.cmd_keygen().unwrap()))
        .collect();
    let e = &mut c.enclaves[0];
    e.cmd_compute_seeds(&announces).unwrap();
    assert!(matches!(e.cmd_seal(0), Err(EnclaveError::Parameter(_))));
    assert!(matches!(e.cmd_seal(3), Err(EnclaveError::Parameter(_))));
    assert_eq!(e.phase(), Phase::SeedsComputed);
    assert_eq!(e.cmd_seal(2).unwrap().len(), 2);
}

#[test]
fn masks_cancel_across_cohort() {
    let mut c = provision(5, Backend::Trusted);
    establish(&mut c, 3);
    let mut sum = FieldVector::zeros(257);
    for e in c.enclaves.iter_mut() {
        let m = e.cmd_generate_mask(257, 1).unwrap();
        assert!(!m.is_zero());
        sum = add_vec(&sum, &m).unwrap();
    }
    assert!(sum.is_zero());
}

#[test]
fn counter_freshness() {
    let mut c = provision(2, Backend::Trusted);
    establish(&mut c, 1);
    let e = &mut c.enclaves[0];
    assert_eq!(e.cmd_peek_counter().unwrap(), 0);
    e.cmd_generate_mask(4, 1).unwrap();
    assert!(matches!(
        e.cmd_generate_mask(4, 1),
        Err(EnclaveError::StaleRound { round: 1, counter: 1 })
    ));
    e.cmd_generate_mask(4, 3).unwrap();
    e.cmd_generate_mask(4, 5).unwrap();
    assert_eq!(e.cmd_peek_counter().unwrap(), 5);
    assert!(matches!(
        e.cmd_generate_mask(4, 4),
        Err(EnclaveError::StaleRound { .. })
    ));
    e.cmd_generate_mask(4, 7).unwrap();
    assert_eq!(e.cmd_peek_counter().unwrap(), 7);
    assert_eq!(e.cmd_peek_counter().unwrap(), 7);
    assert!(matches!(e.rewind_counter(0), Err(EnclaveError::Unsupported)));
}

#[test]
fn counter_survives_restart() {
    let mut c = provision(2, Backend::Trusted);
    establish(&mut c, 1);
    c.enclaves[0].cmd_generate_mask(4, 9).unwrap();
    let dir = c.enclaves[0].dir().to_path_buf();
    let mut reopened = Enclave::open(&dir, Backend::Trusted, &mut OsRng).unwrap();
    assert_eq!(reopened.phase(), Phase::Sealed);
    assert_eq!(reopened.cmd_peek_counter().unwrap(), 9);
    assert!(matches!(
        reopened.cmd_generate_mask(4, 9),
        Err(EnclaveError::StaleRound { .. })
    ));
}

#[test]
fn software_backend_allows_rewind_and_reuses_masks() {
    let mut c = provision(3, Backend::Software);
    establish(&mut c, 2);
    let e = &mut c.enclaves[1];
    let first = e.cmd_generate_mask(64, 4).unwrap();
    e.rewind_counter(3).unwrap();
    let again = e.cmd_generate_mask(64, 4).unwrap();
    assert_eq!(first, again);
    // No tag in the plain layout.
    assert_eq!(e.persistent_footprint().unwrap(), 2 * 32 + 4);
}

#[test]
fn decrypt_share_across_peers_and_recovery() {
    let mut c = provision(6, Backend::Trusted);
    let announces: Vec<_> = c
        .enclaves
        .iter_mut()
        .map(|e| (e.device(), e.cmd_keygen().unwrap()))
        .collect();
    let members: Vec<DeviceId> = announces.iter().map(|(id, _)| *id).collect();
    for e in c.enclaves.iter_mut() {
        e.cmd_compute_seeds(&announces).unwrap();
    }
    let index: BTreeMap<DeviceId, usize> = members.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut inbox = vec![BTreeMap::new(); 6];
    for e in c.enclaves.iter_mut() {
        let dealer = e.device();
        for (to, es) in e.cmd_seal(4).unwrap() {
            inbox[index[&to]].insert(dealer, es);
        }
    }

    let dropped = members[2];
    let survivors: Vec<usize> = (0..6).filter(|&i| i != 2).collect();
    let mut shares = Vec::new();
    for &j in &survivors {
        let es = inbox[j][&dropped];
        let share = c.enclaves[j].cmd_decrypt_share(dropped, &es).unwrap();
        assert_eq!(Some(share.x), cohort_x(&members, members[j]));
        shares.push(share);
    }
    let sk = shamir_reconstruct(&shares, 4).unwrap();
    assert_eq!(public_key(&sk), announces[2].1.pk);

    // Wrong dealer id: the pair key does not match.
    let es = inbox[0][&dropped];
    assert!(matches!(
        c.enclaves[0].cmd_decrypt_share(members[3], &es),
        Err(EnclaveError::Authentication)
    ));
    assert!(matches!(
        c.enclaves[0].cmd_decrypt_share(DeviceId(0xdead), &es),
        Err(EnclaveError::UnknownPeer(_))
    ));
}

#[test]
fn tampered_seed_set_is_detected() {
    let mut c = provision(3, Backend::Trusted);
    establish(&mut c, 2);
    let path = c.enclaves[0].dir().join(storage::SEED_SET_FILE);
    let mut blob = std::fs::read(&path).unwrap();
    blob[0] ^= 1;
    std::fs::write(&path, &blob).unwrap();
    assert!(matches!(
        c.enclaves[0].cmd_generate_mask(4, 1),
        Err(EnclaveError::Tamper)
    ));
    let reopened = Enclave::open(c.enclaves[0].dir(), Backend::Trusted, &mut OsRng).unwrap();
    assert_eq!(reopened.phase(), Phase::Empty);
}

#[test]
fn rotation_resets_counter_and_changes_masks() {
    let mut c = provision(3, Backend::Trusted);
    establish(&mut c, 2);
    let before = c.enclaves[0].cmd_generate_mask(32, 5).unwrap();
    let gen = c.enclaves[0].generation();
    establish(&mut c, 2);
    assert_eq!(c.enclaves[0].generation(), gen + 1);
    assert_eq!(c.enclaves[0].cmd_peek_counter().unwrap(), 0);
    let after = c.enclaves[0].cmd_generate_mask(32, 5).unwrap();
    assert_ne!(before, after);
}

/// Every command in every phase yields its documented result or error.
#[test]
fn state_machine_totality() {
    #[derive(Debug, Clone, Copy)]
    enum Cmd {
        Keygen,
        Compute,
        Seal,
        Mask,
        Decrypt,
        Peek,
    }
    let cmds = [Cmd::Keygen, Cmd::Compute, Cmd::Seal, Cmd::Mask, Cmd::Decrypt, Cmd::Peek];
    let phases = [Phase::Empty, Phase::KeyHeld, Phase::SeedsComputed, Phase::Sealed];

    for &phase in &phases {
        for &cmd in &cmds {
            let mut c = provision(2, Backend::Trusted);
            let announces: Vec<_> = if phase == Phase::Empty {
                Vec::new()
            } else {
                c.enclaves
                    .iter_mut()
                    .map(|e| (e.device(), e.cmd_keygen().unwrap()))
                    .collect()
            };
            let peer = c.enclaves[1].device();
            if matches!(phase, Phase::SeedsComputed | Phase::Sealed) {
                for e in c.enclaves.iter_mut() {
                    e.cmd_compute_seeds(&announces).unwrap();
                }
            }
            let mut received = None;
            if phase == Phase::Sealed {
                received = Some(c.enclaves[1].cmd_seal(1).unwrap()[0].1);
                c.enclaves[0].cmd_seal(1).unwrap();
            }
            let e = &mut c.enclaves[0];
            assert_eq!(e.phase(), phase);
            let dummy = EncryptedShare {
                nonce: [0; 12],
                ct: [0; 32],
                tag: [0; 16],
            };
            let outcome: Result<(), EnclaveError> = match cmd {
                Cmd::Keygen => e.cmd_keygen().map(|_| ()),
                Cmd::Compute => e.cmd_compute_seeds(&announces).map(|_| ()),
                Cmd::Seal => e.cmd_seal(1).map(|_| ()),
                Cmd::Mask => e.cmd_generate_mask(8, 1).map(|_| ()),
                Cmd::Decrypt => e.cmd_decrypt_share(peer, &received.unwrap_or(dummy)).map(|_| ()),
                Cmd::Peek => e.cmd_peek_counter().map(|_| ()),
            };
            use Phase::*;
            let ok = match (phase, cmd) {
                (Empty | Sealed, Cmd::Keygen) => outcome.is_ok(),
                (KeyHeld | SeedsComputed, Cmd::Keygen) => matches!(outcome, Err(EnclaveError::State { .. })),
                (KeyHeld, Cmd::Compute) => outcome.is_ok(),
                (_, Cmd::Compute) => matches!(outcome, Err(EnclaveError::State { .. })),
                (SeedsComputed, Cmd::Seal) => outcome.is_ok(),
                (_, Cmd::Seal) => matches!(outcome, Err(EnclaveError::State { .. })),
                (Sealed, Cmd::Mask | Cmd::Decrypt | Cmd::Peek) => outcome.is_ok(),
                (_, Cmd::Mask | Cmd::Decrypt | Cmd::Peek) => matches!(outcome, Err(EnclaveError::NotReady)),
            };
            assert!(ok, "phase {phase:?} command {cmd:?} gave {outcome:?}");
        }
    }
}

/// Drives device 0 of a sealed cohort into `point` and returns the result.
fn drive_to(c: &mut Cohort, point: KillPoint) -> Result<(), EnclaveError> {
    use KillPoint::*;
    match point {
        MaskComputed | MaskCounterStaged | MaskCounterCommitted => {
            c.enclaves[0].arm_kill(point);
            c.enclaves[0].cmd_generate_mask(8, 3).map(|_| ())
        }
        RotateCounterRemoved | KeygenEpochCommitted => {
            c.enclaves[0].arm_kill(point);
            c.enclaves[0].cmd_keygen().map(|_| ())
        }
        SealBegin | SealStaged | SealSeedCommitted | SealPeersCommitted | SealCommitted => {
            let announces: Vec<_> = c
                .enclaves
                .iter_mut()
                .map(|e| (e.device(), e.cmd_keygen().unwrap()))
                .collect();
            let e = &mut c.enclaves[0];
            e.cmd_compute_seeds(&announces).unwrap();
            e.arm_kill(point);
            e.cmd_seal(2).map(|_| ())
        }
    }
}

#[test]
fn every_kill_point_leaves_consistent_state() {
    for point in KillPoint::ALL {
        let mut c = provision(3, Backend::Trusted);
        establish(&mut c, 2);
        c.enclaves[0].cmd_generate_mask(8, 2).unwrap();
        let released = 2u32;
        let generation = c.enclaves[0].generation();

        let result = drive_to(&mut c, point);
        assert!(
            matches!(result, Err(EnclaveError::Killed(p)) if p == point),
            "{point:?}: {result:?}"
        );
        // A killed session accepts nothing further.
        assert!(matches!(c.enclaves[0].cmd_peek_counter(), Err(EnclaveError::Killed(_))));

        let mut restarted = Enclave::open(c.enclaves[0].dir(), Backend::Trusted, &mut OsRng).unwrap();
        match restarted.phase() {
            Phase::Sealed => {
                let now = restarted.cmd_peek_counter().unwrap();
                if restarted.generation() == generation {
                    assert!(now >= released, "{point:?}: counter rewound to {now}");
                } else {
                    // A completed re-seal under fresh keys starts at 0.
                    assert_eq!(point, KillPoint::SealCommitted);
                    assert_eq!(now, 0);
                }
                if point == KillPoint::MaskCounterCommitted {
                    assert_eq!(now, 3);
                    assert!(matches!(
                        restarted.cmd_generate_mask(8, 3),
                        Err(EnclaveError::StaleRound { .. })
                    ));
                }
            }
            Phase::Empty => {
                // Only an in-progress rotation may give up the sealed state.
                assert!(
                    !matches!(
                        point,
                        KillPoint::MaskComputed | KillPoint::MaskCounterStaged | KillPoint::MaskCounterCommitted
                    ),
                    "{point:?}: sealed state lost outside rotation"
                );
                assert!(matches!(restarted.cmd_peek_counter(), Err(EnclaveError::NotReady)));
            }
            other => panic!("{point:?}: restarted into volatile phase {other:?}"),
        }
    }
}

#[test]
fn seal_kill_points_are_all_or_nothing() {
    let seal_points = [
        KillPoint::SealBegin,
        KillPoint::SealStaged,
        KillPoint::SealSeedCommitted,
        KillPoint::SealPeersCommitted,
        KillPoint::SealCommitted,
    ];
    for point in seal_points {
        let mut c = provision(3, Backend::Trusted);
        let announces: Vec<_> = c
            .enclaves
            .iter_mut()
            .map(|e| (e.device(), e.cmd_keygen().unwrap()))
            .collect();
        let e = &mut c.enclaves[0];
        e.cmd_compute_seeds(&announces).unwrap();
        e.arm_kill(point);
        assert!(matches!(e.cmd_seal(2), Err(EnclaveError::Killed(p)) if p == point));
        let restarted = Enclave::open(e.dir(), Backend::Trusted, &mut OsRng).unwrap();
        let expected = if point == KillPoint::SealCommitted {
            Phase::Sealed
        } else {
            Phase::Empty
        };
        assert_eq!(restarted.phase(), expected, "{point:?}");
        if expected == Phase::Empty {
            assert!(!restarted.dir().join(storage::COUNTER_FILE).exists());
        } else {
            assert_eq!(restarted.persistent_footprint().unwrap(), footprint_formula(3) as u64);
        }
    }
}

/// Collects every 16-byte window of `needle` and checks none occurs in any
/// boundary output.
fn assert_no_leak(log: &[Vec<u8>], needle: &[u8], what: &str) {
    for w in needle.windows(16) {
        for out in log {
            assert!(!out.windows(16).any(|o| o == w), "{what} leaked across the boundary");
        }
    }
}

#[test]
fn boundary_hygiene() {
    let mut c = provision(5, Backend::Trusted);
    for e in c.enclaves.iter_mut() {
        e.record_boundary();
    }
    let announces: Vec<_> = c
        .enclaves
        .iter_mut()
        .map(|e| (e.device(), e.cmd_keygen().unwrap()))
        .collect();
    let members: Vec<DeviceId> = announces.iter().map(|(id, _)| *id).collect();
    for e in c.enclaves.iter_mut() {
        e.cmd_compute_seeds(&announces).unwrap();
    }
    let index: BTreeMap<DeviceId, usize> = members.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut inbox = vec![BTreeMap::new(); 5];
    for e in c.enclaves.iter_mut() {
        let dealer = e.device();
        for (to, es) in e.cmd_seal(3).unwrap() {
            inbox[index[&to]].insert(dealer, es);
        }
    }
    for e in c.enclaves.iter_mut() {
        e.cmd_peek_counter().unwrap();
        e.cmd_generate_mask(64, 1).unwrap();
    }

    // Recover every device's sk through its peers' DECRYPT_SHARE outputs,
    // then scan for sk and every raw pairwise secret.
    for i in 0..5 {
        let mut shares = Vec::new();
        for j in (0..5).filter(|&j| j != i) {
            shares.push(
                c.enclaves[j]
                    .cmd_decrypt_share(members[i], &inbox[j][&members[i]])
                    .unwrap(),
            );
        }
        let sk = shamir_reconstruct(&shares, 3).unwrap();
        assert_eq!(public_key(&sk), announces[i].1.pk);
        let mut secrets = vec![sk.to_vec()];
        for (j, (_, ann)) in announces.iter().enumerate() {
            if j != i {
                secrets.push(dh(&sk, &ann.pk).unwrap().0.to_vec());
            }
        }
        for e in &c.enclaves {
            for s in &secrets {
                assert_no_leak(e.boundary_log(), s, "secret material");
            }
        }
    }
}

use std::io::Write;
use std::net::{TcpListener, UdpSocket};
use std::thread;
use std::time::Duration;

use stimsync_core::marker_transport::{
    broadcast_marker, finalize_session, ingest_gaze, spawn_session_writer, MarkerReceiver, MarkerSender, SessionEvent,
    TransportError,
};
use stimsync_core::register_log::{parse_register, RegisterHeader, RowKind};
use stimsync_core::timebase::Timebase;
use stimsync_core::{GazeSample, MarkerEvent};

const WAIT: Duration = Duration::from_secs(2);

#[test]
fn loopback_marker_arrives_intact() {
    let mut rx = MarkerReceiver::bind("127.0.0.1:0").unwrap();
    let addr = rx.local_addr().unwrap();
    let m = MarkerEvent::new(0, 12.48, "cut_b").unwrap();
    broadcast_marker(&m, addr).unwrap();
    assert_eq!(rx.recv_timeout(WAIT).unwrap(), Some(m));
    assert_eq!(rx.stats().received, 1);
    assert_eq!(rx.stats().missing, 0);
}

#[test]
fn receiver_counts_gaps_reorders_and_garbage() {
    let mut rx = MarkerReceiver::bind("127.0.0.1:0").unwrap();
    let addr = rx.local_addr().unwrap();
    let raw = UdpSocket::bind("127.0.0.1:0").unwrap();
    for payload in [
        "MARK 0 0.100000 a\n",
        "MARK 3 0.200000 b\n",
        "not a marker",
        "MARK 2 0.300000 c\n",
    ] {
        raw.send_to(payload.as_bytes(), addr).unwrap();
    }
    let mut got = Vec::new();
    while let Some(m) = rx.recv_timeout(Duration::from_millis(300)).unwrap() {
        got.push(m.id);
    }
    assert_eq!(got, vec![0, 3, 2]);
    let s = rx.stats();
    assert_eq!((s.received, s.missing, s.out_of_order, s.malformed), (3, 2, 1, 1));
}

#[test]
fn thousand_markers_in_order() {
    let mut rx = MarkerReceiver::bind("127.0.0.1:0").unwrap();
    let addr = rx.local_addr().unwrap();
    let reader = thread::spawn(move || {
        let mut ids = Vec::new();
        while let Some(m) = rx.recv_timeout(Duration::from_millis(500)).unwrap() {
            ids.push(m.id);
        }
        (ids, rx.stats())
    });
    let mut tx = MarkerSender::connect(addr, Duration::from_millis(50)).unwrap();
    for i in 0..1000 {
        tx.mark(i as f64 * 0.001, &format!("m{i}")).unwrap();
        if i % 50 == 0 {
            thread::sleep(Duration::from_millis(1));
        }
    }
    let (ids, stats) = reader.join().unwrap();
    assert_eq!(stats.out_of_order, 0);
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    // Loopback should not lose anything at this rate.
    assert_eq!(ids.len(), 1000, "stats {stats:?}");
}

#[test]
fn unread_receiver_does_not_block_sender() {
    let rx = UdpSocket::bind("127.0.0.1:0").unwrap();
    let budget = Duration::from_millis(2);
    let mut tx = MarkerSender::connect(rx.local_addr().unwrap(), budget).unwrap();
    for i in 0..200 {
        match tx.send(&MarkerEvent::new(i, i as f64, "x").unwrap()) {
            Ok(spent) => assert!(spent <= budget + Duration::from_millis(5), "{spent:?}"),
            Err(TransportError::Dropped) => {}
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn unresolvable_endpoint() {
    assert!(matches!(
        MarkerSender::connect("no-such-host.invalid:9", Duration::from_millis(1)),
        Err(TransportError::Resolve(_))
    ));
}

#[test]
fn gaze_stream_skips_malformed_records() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        for i in 0..10 {
            let g = GazeSample::new(i as f64 * 0.01, 0.5, 0.25).unwrap();
            s.write_all(g.encode().as_bytes()).unwrap();
        }
        s.write_all(b"GAZE 1.200000 1.200 0.500\n").unwrap();
        s.write_all(b"garbage\n\n").unwrap();
        s.write_all(b"GAZE 2.000000 0.100 0.900\n").unwrap();
    });
    let mut stream = ingest_gaze(addr, WAIT, WAIT).unwrap();
    let samples: Vec<GazeSample> = stream.by_ref().map(|r| r.unwrap()).collect();
    server.join().unwrap();
    assert_eq!(samples.len(), 11);
    assert_eq!(samples[10], GazeSample::new(2.0, 0.1, 0.9).unwrap());
    assert_eq!(stream.malformed(), 2);
}

#[test]
fn gaze_stream_idle_timeout() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        s.write_all(b"GAZE 0.500000 0.500 0.500\n").unwrap();
        thread::sleep(Duration::from_millis(600));
    });
    let items: Vec<_> = ingest_gaze(addr, WAIT, Duration::from_millis(150)).unwrap().collect();
    server.join().unwrap();
    assert_eq!(items.len(), 2);
    assert!(items[0].is_ok());
    assert!(matches!(items[1], Err(TransportError::IdleTimeout(_))));
}

#[test]
fn live_session_to_register_file() {
    let mut rx = MarkerReceiver::bind("127.0.0.1:0").unwrap();
    let marker_addr = rx.local_addr().unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let gaze_addr = listener.local_addr().unwrap();
    let gaze_server = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        for t in [0.05, 0.15, 0.25] {
            s.write_all(GazeSample::new(t, 0.5, 0.5).unwrap().encode().as_bytes())
                .unwrap();
        }
    });

    let (events, writer) = spawn_session_writer();
    let marker_events = events.clone();
    let marker_thread = thread::spawn(move || {
        for _ in 0..2 {
            if let Some(m) = rx.recv_timeout(WAIT).unwrap() {
                marker_events.send(SessionEvent::Marker(m)).unwrap();
            }
        }
    });
    let mut tx = MarkerSender::connect(marker_addr, Duration::from_millis(20)).unwrap();
    tx.mark(0.1, "sync_start").unwrap();
    tx.mark(0.2, "cut01").unwrap();
    for g in ingest_gaze(gaze_addr, WAIT, WAIT).unwrap() {
        events.send(SessionEvent::Gaze(g.unwrap())).unwrap();
    }
    drop(events);
    marker_thread.join().unwrap();
    gaze_server.join().unwrap();
    let log = writer.join().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.txt");
    finalize_session(&log, RegisterHeader::default(), Timebase::default(), &path).unwrap();
    let reg = parse_register(&path, Timebase::default()).unwrap();
    let kinds: Vec<RowKind> = reg.rows().iter().map(|r| r.kind).collect();
    assert_eq!(
        kinds,
        vec![
            RowKind::Tick,
            RowKind::SyncMark,
            RowKind::Tick,
            RowKind::CutMark,
            RowKind::Tick
        ]
    );
}

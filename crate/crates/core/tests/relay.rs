mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use common::wait_until;
use soundscape_core::log::EventLog;
use soundscape_core::transport::{Relay, RelayClient, RelayConfig, TopicName};

const T: Duration = Duration::from_secs(5);

fn relay() -> Relay {
    Relay::bind("127.0.0.1:0", RelayConfig::default(), EventLog::null()).unwrap()
}

fn subscribed(relay: &Relay, topic: &TopicName, n: usize) -> Vec<RelayClient> {
    let subs: Vec<RelayClient> = (0..n)
        .map(|_| {
            let c = RelayClient::connect(relay.local_addr()).unwrap();
            c.subscribe(topic).unwrap();
            c
        })
        .collect();
    assert!(wait_until(T, || relay.subscriber_count(topic.as_str()) == n));
    subs
}

#[test]
fn fan_out_preserves_order_and_bytes() {
    let relay = relay();
    let topic = TopicName::new("site0/playback/predictions").unwrap();
    let mut subs = subscribed(&relay, &topic, 3);
    let publisher = RelayClient::connect(relay.local_addr()).unwrap();
    let bodies: Vec<Vec<u8>> = (0..500u32).map(|i| i.to_be_bytes().repeat(1 + (i as usize % 7))).collect();
    for b in &bodies {
        publisher.publish(&topic, b).unwrap();
    }
    for s in &mut subs {
        for b in &bodies {
            let m = s.recv_timeout(T).unwrap().expect("message");
            assert_eq!(m.topic, topic.as_str());
            assert_eq!(&m.body, b);
        }
        assert!(s.recv_timeout(Duration::from_millis(100)).unwrap().is_none());
    }
}

#[test]
fn publish_without_subscribers_is_accepted() {
    let relay = relay();
    let c = RelayClient::connect(relay.local_addr()).unwrap();
    c.publish(&TopicName::new("nobody/listens").unwrap(), b"x").unwrap();
    c.ping().unwrap();
    assert!(wait_until(T, || relay.connection_count() == 1));
}

#[test]
fn late_subscriber_sees_nothing_retained() {
    let relay = relay();
    let topic = TopicName::new("a/b").unwrap();
    let p = RelayClient::connect(relay.local_addr()).unwrap();
    p.publish(&topic, b"early").unwrap();
    std::thread::sleep(Duration::from_millis(50));
    let mut late = subscribed(&relay, &topic, 1);
    assert!(late[0].recv_timeout(Duration::from_millis(200)).unwrap().is_none());
    p.publish(&topic, b"later").unwrap();
    assert_eq!(late[0].recv_timeout(T).unwrap().unwrap().body, b"later");
}

#[test]
fn oversize_frame_only_kills_its_connection() {
    let relay = Relay::bind("127.0.0.1:0", RelayConfig { max_frame: 1024, ..Default::default() }, EventLog::null()).unwrap();
    let topic = TopicName::new("a/b").unwrap();
    let mut sub = subscribed(&relay, &topic, 1);
    let publisher = RelayClient::connect(relay.local_addr()).unwrap();

    let mut rogue = TcpStream::connect(relay.local_addr()).unwrap();
    rogue.write_all(&[0, 0, 0x10, 0, 2]).unwrap();
    rogue.set_read_timeout(Some(T)).unwrap();
    let mut buf = [0u8; 1];
    assert_eq!(rogue.read(&mut buf).unwrap_or(0), 0, "relay should close the oversize connection");

    publisher.publish(&topic, b"still fine").unwrap();
    assert_eq!(sub[0].recv_timeout(T).unwrap().unwrap().body, b"still fine");
    assert!(wait_until(T, || relay.connection_count() == 2));
}

#[test]
fn resubscribe_after_reconnect_gets_only_new_messages() {
    let relay = relay();
    let topic = TopicName::new("a/b").unwrap();
    let publisher = RelayClient::connect(relay.local_addr()).unwrap();
    let mut first = subscribed(&relay, &topic, 1);
    publisher.publish(&topic, b"one").unwrap();
    assert_eq!(first[0].recv_timeout(T).unwrap().unwrap().body, b"one");
    first.clear();
    assert!(wait_until(T, || relay.subscriber_count("a/b") == 0));
    publisher.publish(&topic, b"missed").unwrap();
    let mut again = subscribed(&relay, &topic, 1);
    publisher.publish(&topic, b"two").unwrap();
    assert_eq!(again[0].recv_timeout(T).unwrap().unwrap().body, b"two");
    assert!(again[0].recv_timeout(Duration::from_millis(100)).unwrap().is_none());
}

#[test]
fn silent_connection_is_reaped() {
    let relay = Relay::bind(
        "127.0.0.1:0",
        RelayConfig { keepalive: Duration::from_millis(100), ..Default::default() },
        EventLog::null(),
    )
    .unwrap();
    let _raw = TcpStream::connect(relay.local_addr()).unwrap();
    assert!(wait_until(T, || relay.connection_count() == 1));
    assert!(wait_until(T, || relay.connection_count() == 0));
}

use std::sync::Arc;
use std::time::Duration;

use provgate_core::clock::{Clock, ManualClock};
use provgate_core::coap::{RetransmitPolicy, UdpLink, UdpServer};
use provgate_core::device::{DeviceServer, DeviceSpec, ExecOutcome, Executor, Fleet, TicketBook};
use provgate_core::ledger::{Ledger, Transaction, TxKind, TxStatus};

#[test]
fn executor_over_udp() {
    let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(0));
    let fleet = Arc::new(Fleet::from_specs(1, &[DeviceSpec::new("sensor-1")]).unwrap());
    fleet.device("sensor-1").unwrap().lock().unwrap().set_physical_truth(25.0);
    let tickets = Arc::new(TicketBook::new());
    let device_side = Arc::new(DeviceServer::new(fleet.clone(), tickets.clone()));
    let server = UdpServer::spawn("127.0.0.1:0", Arc::new(move |b: &[u8]| device_side.handle_datagram(b))).unwrap();
    let policy = RetransmitPolicy {
        ack_timeout: Duration::from_millis(500),
        max_retransmit: 4,
    };
    let link = UdpLink::connect(server.local_addr(), policy).unwrap();
    let ledger = Arc::new(Ledger::new(clock.clone()));
    let exec = Executor::new(Arc::new(link), tickets, ledger.clone(), clock);

    ledger.submit_transaction(Transaction::new("r", "sensor-1", TxKind::Read, "op", 0)).unwrap();
    ledger
        .submit_transaction(
            Transaction::new("c", "sensor-1", TxKind::ConfigUpdate, "op", 0).with_param("unit", "fahrenheit"),
        )
        .unwrap();
    ledger.mine_block("m", 2).unwrap();
    let r = ledger.transition("r", TxStatus::Approved).unwrap();
    assert_eq!(exec.execute(&r).unwrap().outcome, ExecOutcome::Value("25.0 C".into()));
    let c = ledger.transition("c", TxStatus::Approved).unwrap();
    assert!(matches!(exec.execute(&c).unwrap().outcome, ExecOutcome::Ack(_)));
    assert_eq!(fleet.list()[0].reading, "77.0 F");
    assert_eq!(ledger.status_of("c"), Some(TxStatus::Executed));
    server.shutdown();
}

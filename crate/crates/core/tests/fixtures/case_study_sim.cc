#include "ns3/applications-module.h"
#include "ns3/core-module.h"
#include "ns3/flow-monitor-module.h"
#include "ns3/internet-module.h"
#include "ns3/mobility-module.h"
#include "ns3/nr-module.h"
#include "ns3/point-to-point-module.h"

using namespace ns3;

int
main(int argc, char* argv[])
{
    double frequencyGHz = 28.0;
    double bandwidthMHz = 200.0;
    uint32_t ueNum = 100;
    uint32_t gnbNum = 1;
    std::string transport = "TCP";
    std::string scenario = "UMi";
    std::string mobility = "ConstantPositionMobilityModel";
    bool beamforming = true;
    double simTime = 1.0;
    std::string caseId = "default";

    CommandLine cmd(__FILE__);
    cmd.AddValue("frequencyGHz", "Carrier frequency in GHz", frequencyGHz);
    cmd.AddValue("bandwidthMHz", "Channel bandwidth in MHz", bandwidthMHz);
    cmd.AddValue("ueNum", "Number of UEs", ueNum);
    cmd.AddValue("gnbNum", "Number of gNBs", gnbNum);
    cmd.AddValue("transport", "TCP or UDP", transport);
    cmd.AddValue("scenario", "3GPP scenario", scenario);
    cmd.AddValue("mobility", "UE mobility model", mobility);
    cmd.AddValue("beamforming", "Enable ideal beamforming", beamforming);
    cmd.AddValue("simTime", "Simulation time in seconds", simTime);
    cmd.AddValue("caseId", "Test case identifier", caseId);
    cmd.Parse(argc, argv);

    NodeContainer gnbNodes;
    gnbNodes.Create(gnbNum);
    NodeContainer ueNodes;
    ueNodes.Create(ueNum);

    MobilityHelper mobilityHelper;
    mobilityHelper.SetMobilityModel("ns3::ConstantPositionMobilityModel");
    mobilityHelper.Install(gnbNodes);
    if (mobility.find("ConstantVelocity") != std::string::npos)
    {
        mobilityHelper.SetMobilityModel("ns3::ConstantVelocityMobilityModel");
    }
    mobilityHelper.Install(ueNodes);

    Ptr<NrPointToPointEpcHelper> epcHelper = CreateObject<NrPointToPointEpcHelper>();
    Ptr<IdealBeamformingHelper> beamformingHelper = CreateObject<IdealBeamformingHelper>();
    Ptr<NrHelper> nrHelper = CreateObject<NrHelper>();
    nrHelper->SetBeamformingHelper(beamformingHelper);
    nrHelper->SetEpcHelper(epcHelper);

    CcBwpCreator ccBwpCreator;
    CcBwpCreator::SimpleOperationBandConf bandConf(frequencyGHz * 1e9, bandwidthMHz * 1e6, 1, BandwidthPartInfo::UMi_StreetCanyon);
    OperationBandInfo band = ccBwpCreator.CreateOperationBandContiguousCc(bandConf);
    nrHelper->InitializeOperationBand(&band);
    BandwidthPartInfoPtrVector allBwps = CcBwpCreator::GetAllBwps({band});

    if (beamforming)
    {
        beamformingHelper->SetAttribute("BeamformingMethod", TypeIdValue(DirectPathBeamforming::GetTypeId()));
    }

    NetDeviceContainer gnbDevs = nrHelper->InstallGnbDevice(gnbNodes, allBwps);
    NetDeviceContainer ueDevs = nrHelper->InstallUeDevice(ueNodes, allBwps);
    for (auto it = gnbDevs.Begin(); it != gnbDevs.End(); ++it)
    {
        DynamicCast<NrGnbNetDevice>(*it)->UpdateConfig();
    }
    for (auto it = ueDevs.Begin(); it != ueDevs.End(); ++it)
    {
        DynamicCast<NrUeNetDevice>(*it)->UpdateConfig();
    }

    Ptr<Node> pgw = epcHelper->GetPgwNode();
    NodeContainer remoteHostContainer;
    remoteHostContainer.Create(1);
    Ptr<Node> remoteHost = remoteHostContainer.Get(0);
    InternetStackHelper internet;
    internet.Install(remoteHostContainer);
    PointToPointHelper p2ph;
    p2ph.SetDeviceAttribute("DataRate", DataRateValue(DataRate("100Gb/s")));
    NetDeviceContainer internetDevices = p2ph.Install(pgw, remoteHost);
    Ipv4AddressHelper ipv4h;
    ipv4h.SetBase("1.0.0.0", "255.0.0.0");
    ipv4h.Assign(internetDevices);

    internet.Install(ueNodes);
    Ipv4InterfaceContainer ueIpIface = epcHelper->AssignUeIpv4Address(ueDevs);
    nrHelper->AttachToClosestEnb(ueDevs, gnbDevs);
    std::cout << "KPI attached_ues=" << ueDevs.GetN() << std::endl;

    uint16_t port = 10000;
    std::string factory = transport == "UDP" ? "ns3::UdpSocketFactory" : "ns3::TcpSocketFactory";
    ApplicationContainer serverApps;
    ApplicationContainer clientApps;
    for (uint32_t u = 0; u < ueNodes.GetN(); ++u)
    {
        PacketSinkHelper sink(factory, InetSocketAddress(Ipv4Address::GetAny(), port));
        serverApps.Add(sink.Install(ueNodes.Get(u)));
        BulkSendHelper bulk(factory, InetSocketAddress(ueIpIface.GetAddress(u), port));
        bulk.SetAttribute("MaxBytes", UintegerValue(0));
        clientApps.Add(bulk.Install(remoteHost));
    }
    serverApps.Start(Seconds(0.1));
    clientApps.Start(Seconds(0.2));

    FlowMonitorHelper flowmonHelper;
    Ptr<FlowMonitor> monitor = flowmonHelper.InstallAll();

    Simulator::Stop(Seconds(simTime));
    Simulator::Run();
    monitor->CheckForLostPackets();
    monitor->SerializeToXmlFile("flowmon.xml", true, true);
    Simulator::Destroy();
    return 0;
}

"""
Simple script to verify a running fedgate gateway is answering
"""

import os

import requests

RESERVED = "/.well-known/fedgate"


def test_server():
    """Smoke-test the gateway admin endpoints and one federated request"""
    base_url = os.environ.get("FEDGATE_URL", "http://127.0.0.1:8080")

    print("Testing fedgate gateway...")
    print("=" * 50)

    # Test health endpoint
    try:
        response = requests.get(f"{base_url}{RESERVED}/healthz", timeout=5)
        if response.status_code == 200:
            data = response.json()
            print("✅ Health check passed!")
            print(f"   Status: {data.get('status')}")
            print(f"   Service: {data.get('service')}")
        else:
            print(f"❌ Health check failed: {response.status_code}")
            return False
    except requests.RequestException as e:
        print(f"❌ Health check failed: {str(e)}")
        return False

    # Test endpoint status (every configured endpoint, as last polled)
    try:
        response = requests.get(f"{base_url}{RESERVED}/status", timeout=5)
        if response.status_code == 200:
            endpoints = response.json().get('endpoints', [])
            print("✅ Status endpoint working!")
            for endpoint in endpoints:
                print(f"   {endpoint['id']}: {endpoint['status']}")
        else:
            print(f"❌ Status endpoint failed: {response.status_code}")
    except requests.RequestException as e:
        print(f"❌ Status endpoint failed: {str(e)}")

    # An anonymous request must be refused before any endpoint is asked
    try:
        response = requests.get(f"{base_url}/", allow_redirects=False, timeout=5)
        if response.status_code == 401:
            print("✅ Anonymous requests are refused!")
        else:
            print(f"⚠️  Anonymous request returned unexpected code: {response.status_code}")
    except requests.RequestException as e:
        print(f"❌ Anonymous request failed: {str(e)}")

    print("\n🎉 Basic gateway functionality verified!")
    print("\nNext steps:")
    print("1. Put endpoint secrets in your .env file (referenced as env:NAME in fedgate.yaml)")
    print("2. Validate the config: python -m server.cli check --config fedgate.yaml")
    print("3. Resolve a path: python -m server.cli resolve /data/run1.root --config fedgate.yaml")

    return True


if __name__ == "__main__":
    test_server()

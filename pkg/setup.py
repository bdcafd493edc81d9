#!/usr/bin/env python3
"""
Setup script for relpose-adapt package
"""

from setuptools import setup, find_packages


# 读取README文件
def read_long_description():
    """读取README.md文件作为长描述"""
    try:
        with open("README.md", "r", encoding="utf-8") as fh:
            return fh.read()
    except FileNotFoundError:
        return "合成火柴人世界中基于关系能量的跨模态三维姿态自适应流水线"


# 读取requirements文件
def read_requirements():
    """读取requirements.txt文件"""
    try:
        with open("requirements.txt", "r", encoding="utf-8") as fh:
            return [line.strip() for line in fh if line.strip() and not line.startswith("#")]
    except FileNotFoundError:
        return [
            "fastmcp>=2.8.0",
            "pydantic>=2.0.0",
            "numpy>=1.24.0",
            "scipy>=1.10.0",
            "torch>=2.1.0",
            "opencv-python-headless>=4.8.0",
            "matplotlib>=3.7.0",
            "tqdm>=4.65.0",
        ]


setup(
    name="relpose-adapt",
    version="1.0.0",
    author="Your Name",
    author_email="your.email@example.com",
    description="合成火柴人世界中基于关系能量的跨模态三维姿态自适应流水线与 MCP 查询服务器",
    long_description=read_long_description(),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests*"]),
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.10",
    install_requires=read_requirements(),
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "hypothesis>=6.80.0",
            "black>=23.0.0",
            "isort>=5.12.0",
            "flake8>=6.0.0",
            "mypy>=1.0.0",
            "build>=0.10.0",
            "twine>=4.0.0",
            "pillow>=9.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "relpose-adapt=relpose_adapt:main",
            "relpose-adapt-server=relpose_adapt.main:main",
        ],
    },
    include_package_data=True,
    keywords=["mcp", "pose-estimation", "domain-adaptation", "contrastive-learning", "autoencoder", "fastmcp"],
)
